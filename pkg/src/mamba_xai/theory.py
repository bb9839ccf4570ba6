"""Executable expressiveness results.

* A single selective channel computes "count in row" exactly; a single
  scalar attention head cannot (with or without softmax).
* A selective channel with unit transitions reproduces an unnormalized
  causal attention head.
* Token mixers fall into three families: fixed (S4/DSS-style kernels), fixed
  with a diagonal data-dependent gate (GSS/Hyena-style), and data-controlled
  non-diagonal (selective SSM).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention_view import materialize_alpha
from .ssm_core import DiscreteSystem, S6Params, compute_ssm_params, linear_recurrence, sigmoid


def _bits(x) -> np.ndarray:
    b = np.asarray(x)
    if b.ndim != 1 or not np.all((b == 0) | (b == 1)):
        raise ValueError("expected a 1-D binary sequence")
    return b.astype(np.int64)


def count_in_row_oracle(x) -> list[int]:
    """``y_i = max({i - j + 1 : x_j..x_i all 1} U {0})``, evaluated literally."""
    b = _bits(x)
    out = []
    for i in range(len(b)):
        best = 0
        for j in range(i + 1):
            if all(b[k] > 0 for k in range(j, i + 1)):
                best = max(best, i - j + 1)
        out.append(best)
    return out


@dataclass(frozen=True)
class CountChannel:
    """Scalar selective channel without discretization.

    ``A_bar_t = s_a * x_t + a``, ``B_bar_t = s_b * x_t``, ``C_t = s_c * x_t``.
    With ``s_a = s_b = s_c = 1`` and ``a = 0`` the transition is the input bit
    itself, so a zero resets the state and a one increments it.
    """

    s_a: float = 1.0
    a: float = 0.0
    s_b: float = 1.0
    s_c: float = 1.0

    def system(self, x) -> DiscreteSystem:
        x = np.asarray(x, dtype=np.float64)
        L = len(x)
        return DiscreteSystem(
            A_bar=(self.s_a * x + self.a).reshape(L, 1, 1),
            B_bar=(self.s_b * x).reshape(L, 1, 1),
            C=(self.s_c * x).reshape(L, 1),
            delta=np.ones((L, 1)),
        )

    def __call__(self, x) -> np.ndarray:
        """Run on one sequence (L,) or a batch (B, L); returns outputs of the same shape."""
        x = np.asarray(x, dtype=np.float64)
        batch = x.T if x.ndim == 2 else x
        h = linear_recurrence(self.s_a * batch + self.a, self.s_b * batch * batch)
        y = self.s_c * batch * h
        return y.T if x.ndim == 2 else y


def build_count_channel() -> CountChannel:
    return CountChannel()


def all_binary_sequences(L: int) -> np.ndarray:
    """All 2**L sequences as rows, first element most significant."""
    codes = np.arange(2**L)[:, None]
    return (codes >> np.arange(L - 1, -1, -1)) & 1


def count_channel_exhaustive(max_len: int = 12) -> dict[int, int]:
    """Mismatch count per length when comparing the channel against the oracle."""
    channel = build_count_channel()
    mismatches = {}
    for L in range(1, max_len + 1):
        seqs = all_binary_sequences(L)
        got = channel(seqs)
        want = np.array([count_in_row_oracle(s) for s in seqs], dtype=np.float64)
        mismatches[L] = int(np.sum(np.any(got != want, axis=1)))
    return mismatches


@dataclass(frozen=True)
class ScalarHead:
    w_q: float
    w_k: float
    w_v: float


def scalar_head_output(head: ScalarHead, x, i: int, softmax: bool = True) -> float:
    """Output at 0-based position ``i`` of a width-1 attention head over all of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    scores = (head.w_q * x[i]) * (head.w_k * x)
    values = head.w_v * x
    if softmax:
        w = np.exp(scores - scores.max())
        return float(np.sum(w / w.sum() * values))
    return float(np.sum(scores * values))


# position 3 of the three length-3 cases used in the infeasibility argument
_CASES = (((0, 1, 1), 2.0), ((0, 0, 1), 1.0), ((1, 0, 1), 1.0))


def head_infeasibility_residual() -> float:
    """Residual ``|O_3 - 1|`` on (1, 0, 1) after fitting the first two cases exactly.

    Dividing the two fitted equations, ``2 (2 + e) / (1 + 2 e) = 2``, gives
    ``e = exp(w_q w_k) = 1``; then ``w_v * 2 / 3 = 2`` gives ``w_v = 3``.
    """
    e = 1.0  # unique root of 4 + 2e = 2 + 4e
    w_v = 2.0 * (1.0 + 2.0 * e) / (2.0 * e)
    head = ScalarHead(w_q=1.0, w_k=math.log(e), w_v=w_v)
    fitted = [scalar_head_output(head, x, 2) for x, _ in _CASES[:2]]
    if not (math.isclose(fitted[0], 2.0) and math.isclose(fitted[1], 1.0)):
        raise AssertionError(f"closed-form fit failed: {fitted}")
    return abs(scalar_head_output(head, _CASES[2][0], 2) - 1.0)


def head_grid_min_violation(softmax: bool = True, lo: float = -10.0, hi: float = 10.0,
                            step: float = 0.01) -> tuple[float, float, float]:
    """Minimum over a (w_q w_k, w_v) grid of the worst violation across the cases.

    Returns ``(min_violation, qk_at_min, v_at_min)``.
    """
    n = int(round((hi - lo) / step)) + 1
    grid = lo + step * np.arange(n)
    s = grid[:, None]
    v = grid[None, :]
    worst = np.zeros((n, n))
    for x, target in _CASES:
        xs = np.asarray(x, dtype=np.float64)
        scores = s * xs[-1] * xs[None, :]  # (n, 3)
        if softmax:
            w = np.exp(scores - scores.max(axis=1, keepdims=True))
            mix = (w * xs).sum(axis=1) / w.sum(axis=1)
        else:
            mix = (scores * xs).sum(axis=1)
        out = mix[:, None] * v
        worst = np.maximum(worst, np.abs(out - target))
    k = np.unravel_index(np.argmin(worst), worst.shape)
    return float(worst[k]), float(grid[k[0]]), float(grid[k[1]])


def causal_head_as_channel(q: np.ndarray, k: np.ndarray) -> DiscreteSystem:
    """Selective channel with ``A_bar = 1``, ``B_bar_j = K_j``, ``C_i = Q_i``."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    L = len(q)
    return DiscreteSystem(A_bar=np.ones((L, 1, 1)), B_bar=k.reshape(L, 1, 1),
                          C=q.reshape(L, 1), delta=np.ones((L, 1)))


def causal_head_channel_residual(rng: np.random.Generator, L: int = 8) -> float:
    """Max |alpha - tril(Q K^T)| for a random scalar head realized as a channel."""
    x = rng.normal(size=L)
    w_q, w_k = rng.normal(size=2)
    q, k = w_q * x, w_k * x
    alpha = materialize_alpha(causal_head_as_channel(q, k), 0).alpha
    return float(np.max(np.abs(alpha - np.tril(np.outer(q, k)))))


# ---------------------------------------------------------------- mixer probes

MIXER_FAMILIES = ("s4_fixed", "gated_diagonal", "selective")


@dataclass
class MixerProbeReport:
    layer: str
    operator_changes: bool
    offdiag_max: float | None  # None when there is no data-dependent part
    diag_max: float | None

    @property
    def data_controlled_nondiagonal(self) -> bool:
        return bool(self.operator_changes and self.offdiag_max is not None
                    and self.offdiag_max > 1e-6)


class _ToyMixer:
    """Linear in the auxiliary input ``u``; coefficients may depend on ``c``."""

    def __init__(self, family: str, L: int, rng: np.random.Generator, N: int = 4):
        self.family, self.L = family, L
        if family in ("s4_fixed", "gated_diagonal"):
            A_bar = np.exp(-rng.uniform(0.1, 1.0, N))
            B_bar, C = rng.normal(size=N), rng.normal(size=N)
            # k_i = C A_bar^i B_bar, built from parameters only
            self.kernel = np.array([np.sum(C * A_bar**i * B_bar) for i in range(L)])
            self.gate_w, self.gate_b = rng.normal(), rng.normal()
        elif family == "selective":
            self.params = S6Params(A=-np.arange(1.0, N + 1)[None, :], W_B=rng.normal(size=(1, N)),
                                   W_C=rng.normal(size=(1, N)), dt_down=rng.normal(size=1),
                                   dt_up=np.ones(1), dt_bias=rng.normal(size=1))
        else:
            raise ValueError(f"unknown mixer family {family!r}; expected one of {MIXER_FAMILIES}")

    def operator(self, c: np.ndarray) -> np.ndarray:
        L = self.L
        if self.family == "selective":
            sys = compute_ssm_params(c.reshape(L, 1), self.params)
            return materialize_alpha(sys, 0).alpha
        idx = np.subtract.outer(np.arange(L), np.arange(L))
        T = np.where(idx >= 0, self.kernel[np.clip(idx, 0, None)], 0.0)
        if self.family == "gated_diagonal":
            T = sigmoid(self.gate_w * c + self.gate_b)[:, None] * T
        return T

    def __call__(self, u: np.ndarray, c: np.ndarray) -> np.ndarray:
        return self.operator(c) @ u


def _jacobian_wrt_u(layer: _ToyMixer, c: np.ndarray) -> np.ndarray:
    eye = np.eye(layer.L)
    return np.stack([layer(eye[j], c) for j in range(layer.L)], axis=1)


def _conditioning_jacobian(layer: _ToyMixer, u: np.ndarray, c: np.ndarray,
                           eps: float = 1e-6) -> np.ndarray:
    J = np.zeros((layer.L, layer.L))
    for j in range(layer.L):
        cp, cm = c.copy(), c.copy()
        cp[j] += eps
        cm[j] -= eps
        J[:, j] = (layer(u, cp) - layer(u, cm)) / (2 * eps)
    return J


def mixer_probe(layer: str, seed: int = 0, L: int = 8) -> MixerProbeReport:
    rng = np.random.default_rng(seed)
    mixer = _ToyMixer(layer, L, rng)
    c1, c2, u = rng.normal(size=L), rng.normal(size=L), rng.normal(size=L)
    M1, M2 = _jacobian_wrt_u(mixer, c1), _jacobian_wrt_u(mixer, c2)
    changes = not np.array_equal(M1, M2)
    if not changes:
        return MixerProbeReport(layer, False, None, None)
    J = _conditioning_jacobian(mixer, u, c1)
    off = J - np.diag(np.diag(J))
    return MixerProbeReport(layer, True, float(np.max(np.abs(off))),
                            float(np.max(np.abs(np.diag(J)))))
