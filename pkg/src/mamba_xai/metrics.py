"""Evaluation protocols: perturbation AUC, segmentation scores, oversmoothing."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .model import ModelState

FRACTIONS = tuple(p / 10 for p in range(1, 10))


@dataclass
class PerturbationCurve:
    fractions: list[float]
    values: list[float]
    mode: str
    auc: float  # trapezoid area divided by the fraction span
    auc_raw: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegmentationScore:
    pixel_accuracy: float
    miou: float
    map: float
    iou_foreground: float
    iou_background: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SmoothnessProfile:
    values: list[float]  # one per block, layer 1 first

    def to_dict(self) -> dict:
        return asdict(self)


def masked_count(fraction: float, num_tokens: int) -> int:
    """``ceil(fraction * L)``, robust to binary round-off (0.3 * 10 -> 3)."""
    return math.ceil(fraction * num_tokens - 1e-9)


def perturbation_order(relevance: np.ndarray, mode: str) -> np.ndarray:
    """Token indices in masking order; ties break by ascending index."""
    r = np.asarray(relevance, dtype=np.float64)
    if mode == "positive":
        return np.argsort(-r, kind="stable")
    if mode == "negative":
        return np.argsort(r, kind="stable")
    raise ValueError(f"mode must be 'positive' or 'negative', got {mode!r}")


def perturbation_curve(predict: Callable[[np.ndarray], np.ndarray], inputs: np.ndarray,
                       labels: Sequence[int], relevance: np.ndarray, mode: str,
                       metric: str = "accuracy", fractions: Sequence[float] = FRACTIONS,
                       mask_value: np.ndarray | float = 0.0) -> PerturbationCurve:
    """Mask tokens cumulatively by relevance and track the model's score.

    ``predict`` maps one token sequence (L, D) to a logits vector. ``metric``
    is ``"accuracy"`` (top-1 against ``labels``) or ``"logit"`` (mean logit of
    the label class).
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    relevance = np.asarray(relevance, dtype=np.float64)
    if inputs.ndim == 2:
        inputs, relevance = inputs[None], relevance.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    n, L = inputs.shape[:2]
    if relevance.shape != (n, L):
        raise ValueError(f"relevance shape {relevance.shape} does not match inputs ({n}, {L})")
    if labels.shape != (n,):
        raise ValueError(f"need {n} labels, got {labels.shape}")
    if metric not in ("accuracy", "logit"):
        raise ValueError(f"unknown metric {metric!r}")
    fr = [float(f) for f in fractions]
    if any(b <= a for a, b in zip(fr, fr[1:])):
        raise ValueError("fractions must be strictly increasing")

    values = []
    orders = [perturbation_order(relevance[k], mode) for k in range(n)]
    for f in fr:
        count = masked_count(f, L)
        total = 0.0
        for k in range(n):
            x = inputs[k].copy()
            x[orders[k][:count]] = mask_value
            logits = np.asarray(predict(x), dtype=np.float64)
            if metric == "accuracy":
                total += float(np.argmax(logits) == labels[k])
            else:
                total += float(logits[labels[k]])
        values.append(total / n)

    area = float(sum((fr[i + 1] - fr[i]) * (values[i] + values[i + 1]) / 2
                     for i in range(len(fr) - 1)))
    span = fr[-1] - fr[0]
    return PerturbationCurve(fractions=fr, values=values, mode=mode,
                             auc=area / span if span > 0 else values[0], auc_raw=area)


def average_precision(scores: np.ndarray, targets: np.ndarray) -> float:
    """Step-wise area under the precision-recall curve, one point per distinct score.

    Returns 0.0 when there are no positives.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(targets).ravel().astype(bool)
    n_pos = int(t.sum())
    if n_pos == 0:
        return 0.0
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    tp = np.cumsum(t)
    # last index of each block of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = tp[ends].astype(np.float64)
    precision = tp / (ends + 1)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def segmentation_score(heatmap: np.ndarray, mask: np.ndarray) -> SegmentationScore:
    """Score a heatmap against a binary foreground mask.

    The heatmap is binarized at its own mean (strictly above = foreground).
    With an empty mask, mIoU is the background IoU alone and mAP is 0.
    """
    heat = np.asarray(heatmap, dtype=np.float64)
    gt = np.asarray(mask).astype(bool)
    if heat.shape != gt.shape:
        raise ValueError(f"heatmap {heat.shape} and mask {gt.shape} differ in shape")
    pred = heat > heat.mean()
    acc = float(np.mean(pred == gt))

    def iou(p, g):
        union = np.logical_or(p, g).sum()
        return float(np.logical_and(p, g).sum() / union) if union else float("nan")

    iou_fg, iou_bg = iou(pred, gt), iou(~pred, ~gt)
    if not gt.any():
        miou = iou_bg
    elif gt.all():
        miou = iou_fg
    else:
        miou = (iou_fg + iou_bg) / 2
    return SegmentationScore(pixel_accuracy=acc, miou=miou, map=average_precision(heat, gt),
                             iou_foreground=iou_fg, iou_background=iou_bg)


def mean_pairwise_cosine(features: np.ndarray) -> float:
    """Mean cosine similarity over the n(n-1)/2 unordered token pairs."""
    X = np.asarray(features, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two tokens")
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm token: cosine similarity undefined")
    U = X / norms[:, None]
    S = U @ U.T
    iu = np.triu_indices(n, k=1)
    return float(S[iu].sum() * 2.0 / (n * (n - 1)))


def oversmoothing_profile(state: ModelState) -> SmoothnessProfile:
    vals = []
    for c in state.layers:
        feats = c.y if state.cls_index is None else np.delete(c.y, state.cls_index, axis=0)
        vals.append(mean_pairwise_cosine(feats))
    return SmoothnessProfile(values=vals)
