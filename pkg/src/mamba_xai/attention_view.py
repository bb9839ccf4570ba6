"""Hidden attention matrices of a selective SSM channel.

Row ``i`` of the matrix holds the weights with which ``x_j`` enters
``y_i``: ``alpha[i, j] = sum_m C_i[m] prod_{k=j+1..i} A_bar_k[m] B_bar_j[m]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .ssm_core import DiscreteSystem, S6Params, delta_projection


@dataclass
class AttentionMatrix:
    alpha: np.ndarray
    layer: int = 0
    channel: int = 0
    direction: str = "forward"
    coordinate: int | None = None

    @property
    def shape(self):
        return self.alpha.shape


@dataclass
class QKHFactors:
    q_tilde: np.ndarray  # (L, N)
    k_tilde: np.ndarray  # (L, N)
    h_tilde: np.ndarray  # (L, L, N), zero above the diagonal
    channel: int = 0


def _rows(A_bar: np.ndarray, B_bar: np.ndarray, C: np.ndarray, coordinate: int | None):
    """Yield ``(i, row_i)`` for a batch of channels.

    ``A_bar``/``B_bar`` are (L, K, N) and ``C`` is (L, N); each row is (K, i + 1).
    The running product ``P[j] = prod_{k=j+1..i} A_bar_k`` is updated in place,
    so the whole matrix costs O(L^2 N) per channel.
    """
    L, K, N = A_bar.shape
    P = np.zeros((L, K, N))
    coords = range(N) if coordinate is None else (coordinate,)
    for i in range(L):
        P[:i] *= A_bar[i]
        P[i] = 1.0
        row = np.zeros((K, i + 1))
        for m in coords:
            row += C[i, m] * (P[: i + 1, :, m] * B_bar[: i + 1, :, m]).T
        yield i, row


def materialize_alpha(sys: DiscreteSystem, channel: int, coordinate: int | None = None,
                      layer: int = 0) -> AttentionMatrix:
    """Exact hidden attention of one channel (or one state coordinate of it)."""
    L, D, N = sys.A_bar.shape
    if not 0 <= channel < D:
        raise IndexError(f"channel {channel} out of range [0, {D})")
    if coordinate is not None and not 0 <= coordinate < N:
        raise IndexError(f"coordinate {coordinate} out of range [0, {N})")
    sl = slice(channel, channel + 1)
    alpha = np.zeros((L, L))
    for i, row in _rows(sys.A_bar[:, sl], sys.B_bar[:, sl], sys.C, coordinate):
        alpha[i, : i + 1] = row[0]
    return AttentionMatrix(alpha, layer=layer, channel=channel, coordinate=coordinate)


def materialize_all(sys: DiscreteSystem) -> np.ndarray:
    """All channels at once, shape (D, L, L)."""
    L, D, _ = sys.A_bar.shape
    alpha = np.zeros((D, L, L))
    for i, row in _rows(sys.A_bar, sys.B_bar, sys.C, None):
        alpha[:, i, : i + 1] = row
    return alpha


def inner_matrices(sys: DiscreteSystem, layer: int = 0) -> Iterator[AttentionMatrix]:
    """Every per-coordinate inner matrix of a layer: exactly D * N of them."""
    _, D, N = sys.A_bar.shape
    for d in range(D):
        for m in range(N):
            yield materialize_alpha(sys, d, m, layer=layer)


def apply_alpha(alpha: AttentionMatrix | np.ndarray, x: np.ndarray) -> np.ndarray:
    a = alpha.alpha if isinstance(alpha, AttentionMatrix) else np.asarray(alpha)
    x = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or x.shape != (a.shape[1],):
        raise ValueError(f"cannot apply {a.shape} matrix to vector of shape {x.shape}")
    return a @ x


def reverse_direction(alpha: np.ndarray) -> np.ndarray:
    """Map a matrix computed on the reversed sequence back to natural order."""
    return alpha[..., ::-1, ::-1].copy()


def combine_bidirectional(fwd: AttentionMatrix, bwd: AttentionMatrix) -> AttentionMatrix:
    if fwd.alpha.shape != bwd.alpha.shape:
        raise ValueError(f"shape mismatch {fwd.alpha.shape} vs {bwd.alpha.shape}")
    return AttentionMatrix(fwd.alpha + bwd.alpha, layer=fwd.layer, channel=fwd.channel,
                           direction="combined")


def factorize_qkh(x_hat: np.ndarray, params: S6Params, channel: int,
                  delta_shift: float = 0.0) -> QKHFactors:
    """ReLU-simplified query/key/history factors for one channel.

    Only strictly positive step pre-activations contribute to the history sum.
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x_hat.ndim != 2 or x_hat.shape[1] != params.channels:
        raise ValueError(f"x_hat must be (L, {params.channels}), got {x_hat.shape}")
    if not 0 <= channel < params.channels:
        raise IndexError(f"channel {channel} out of range")
    s = delta_projection(x_hat, params)[:, channel] + delta_shift
    relu_s = np.where(s > 0, s, 0.0)
    q = x_hat @ params.W_C
    k = relu_s[:, None] * (x_hat @ params.W_B)
    csum = np.cumsum(relu_s)
    L = len(s)
    span = csum[:, None] - csum[None, :]  # sum over k = j+1..i
    tril = np.tril(np.ones((L, L), dtype=bool))
    h = np.where(tril[:, :, None], np.exp(np.where(tril, span, 0.0)[:, :, None]
                                          * params.A[channel][None, None, :]), 0.0)
    return QKHFactors(q_tilde=q, k_tilde=k, h_tilde=h, channel=channel)


def approx_alpha_from_factors(f: QKHFactors) -> AttentionMatrix:
    alpha = np.einsum("im,ijm,jm->ij", f.q_tilde, f.h_tilde, f.k_tilde)
    return AttentionMatrix(np.tril(alpha), channel=f.channel)
