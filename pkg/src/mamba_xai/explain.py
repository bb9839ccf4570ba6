"""Relevance maps from hidden attention: raw attention, rollout, attribution."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gradients import backward_from_seed, logit_seed
from .model import ModelState, layer_attention


@dataclass
class RelevanceMap:
    """CLS-row relevance.

    ``row`` is the raw CLS row of the aggregated matrix over all ``L + 1``
    positions; ``scores`` drops the CLS column and clamps negatives to zero.
    """

    row: np.ndarray
    cls_index: int
    matrix: np.ndarray | None = None

    @property
    def scores(self) -> np.ndarray:
        s = np.delete(self.row, self.cls_index)
        return np.maximum(s, 0.0)

    @property
    def grid(self) -> np.ndarray:
        s = self.scores
        side = math.isqrt(len(s))
        if side * side != len(s):
            raise ValueError(f"{len(s)} tokens do not form a square grid")
        return s.reshape(side, side)

    def upsample(self, out_h: int, out_w: int) -> np.ndarray:
        return upsample_bilinear(self.grid, out_h, out_w)


def _require_cls(state: ModelState) -> int:
    if state.cls_index is None:
        raise ValueError("relevance maps need a CLS token (cls_position is 'none')")
    return state.cls_index


def mean_layer_attention(state: ModelState, layer: int) -> np.ndarray:
    """Channel mean of the hidden attention of block ``layer`` (1-based)."""
    return layer_attention(state, layer).mean(axis=0)


def raw_attention(state: ModelState) -> RelevanceMap:
    """Hidden attention averaged over layers and channels."""
    idx = _require_cls(state)
    n = len(state.layers)
    if n == 0:
        rho = np.eye(state.seq_len)
    else:
        rho = sum(mean_layer_attention(state, lam) for lam in range(1, n + 1)) / n
    return RelevanceMap(rho[idx].copy(), idx, rho)


def aggregate(layer_mats) -> np.ndarray:
    """Product of per-layer matrices with layer 1 leftmost."""
    mats = list(layer_mats)
    rho = mats[0]
    for m in mats[1:]:
        rho = rho @ m
    return rho


def rollout_layers(state: ModelState) -> list[np.ndarray]:
    eye = np.eye(state.seq_len)
    return [eye + mean_layer_attention(state, lam) for lam in range(1, len(state.layers) + 1)]


def rollout(state: ModelState) -> RelevanceMap:
    idx = _require_cls(state)
    rho = aggregate([np.eye(state.seq_len)] + rollout_layers(state))
    return RelevanceMap(rho[idx].copy(), idx, rho)


def attribution_layers(state: ModelState, target_class: int,
                       seed: np.ndarray | None = None,
                       wrt: str = "gated") -> list[np.ndarray]:
    """Per-layer ``I + (g * mean_attn)^+`` where ``g`` scales row ``i``.

    ``g[i]`` is the channel mean of ``d logit / d wrt`` at token ``i``.  The
    default differentiates the gated S6 output, whose channels are the same
    ones the hidden attention is indexed by.  ``"y_prime"`` is accepted too,
    but a block output feeding a LayerNorm gets a gradient whose feature mean
    is zero, so that choice reduces every layer to the identity.
    """
    if seed is None:
        seed = logit_seed(state, target_class)
    eye = np.eye(state.seq_len)
    out = []
    for lam in range(1, len(state.layers) + 1):
        grad = backward_from_seed(state, seed, lam, wrt)
        g = grad.mean(axis=1)
        out.append(eye + np.maximum(g[:, None] * mean_layer_attention(state, lam), 0.0))
    return out


def mamba_attribution(state: ModelState, target_class: int,
                      wrt: str = "gated") -> RelevanceMap:
    idx = _require_cls(state)
    layers = attribution_layers(state, target_class, wrt=wrt)
    rho = aggregate([np.eye(state.seq_len)] + layers)
    return RelevanceMap(rho[idx].copy(), idx, rho)


METHODS = {"raw": raw_attention, "rollout": rollout}


def explain(state: ModelState, method: str, target_class: int | None = None) -> RelevanceMap:
    if method == "attr":
        if target_class is None:
            raise ValueError("attribution needs a target class")
        return mamba_attribution(state, target_class)
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    return METHODS[method](state)


def upsample_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D grid."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError("grid must be 2-D")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")

    def axis(n_in, n_out):
        pos = np.zeros(n_out) if n_out == 1 else np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    r0, r1, fr = axis(grid.shape[0], out_h)
    c0, c1, fc = axis(grid.shape[1], out_w)
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c1] * fc
    bot = grid[r1][:, c0] * (1 - fc) + grid[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]
