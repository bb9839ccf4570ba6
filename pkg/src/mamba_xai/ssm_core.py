"""Selective (S6) state-space layer: parameters, discretization, and scans.

Shapes used throughout: ``L`` timesteps, ``D`` channels, ``N`` state size.
Channels share the input-dependent ``B_i``/``C_i`` projections but each
has its own step size ``delta[i, d]`` and diagonal ``A[d, :]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class S6Params:
    """Per-layer selective SSM parameters.

    ``A`` is the real diagonal state matrix per channel (D x N). The step
    projection is rank one: ``delta_pre[i, d] = (x_i @ dt_down) * dt_up[d]
    + dt_bias[d]``.
    """

    A: np.ndarray  # (D, N)
    W_B: np.ndarray  # (D, N)
    W_C: np.ndarray  # (D, N)
    dt_down: np.ndarray  # (D,)
    dt_up: np.ndarray  # (D,)
    dt_bias: np.ndarray  # (D,)

    @property
    def channels(self) -> int:
        return self.A.shape[0]

    @property
    def state_size(self) -> int:
        return self.A.shape[1]


@dataclass
class DiscreteSystem:
    A_bar: np.ndarray  # (L, D, N)
    B_bar: np.ndarray  # (L, D, N)
    C: np.ndarray  # (L, N)
    delta: np.ndarray  # (L, D)
    # pre-activation step and undiscretized B, kept for gradients / factorization
    delta_pre: np.ndarray | None = None  # (L, D)
    B: np.ndarray | None = None  # (L, N)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.A_bar.shape

    def reversed(self) -> "DiscreteSystem":
        flip = lambda a: None if a is None else a[::-1].copy()
        return DiscreteSystem(*(flip(getattr(self, f)) for f in
                                ("A_bar", "B_bar", "C", "delta", "delta_pre", "B")))


def s4d_real_A(channels: int, state_size: int) -> np.ndarray:
    """``A[d, m] = -(m + 1)``: strictly negative, so ``exp(delta * A)`` lies in (0, 1)."""
    return -np.tile(np.arange(1, state_size + 1, dtype=np.float64), (channels, 1))


def init_s6_params(rng: np.random.Generator, channels: int, state_size: int,
                   scale: float = 0.1) -> S6Params:
    u = lambda *shape: rng.uniform(-scale, scale, size=shape)
    return S6Params(
        A=s4d_real_A(channels, state_size),
        W_B=u(channels, state_size),
        W_C=u(channels, state_size),
        dt_down=u(channels),
        dt_up=u(channels),
        dt_bias=u(channels),
    )


def softplus(x):
    """Overflow-safe ``log(1 + exp(x))``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x > 0
    out[pos] = x[pos] + np.log1p(np.exp(-x[pos]))
    out[~pos] = np.log1p(np.exp(x[~pos]))
    return out


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x)


def delta_projection(x_hat: np.ndarray, params: S6Params) -> np.ndarray:
    """Pre-softplus step ``S_delta(x_i)`` for every timestep and channel, (L, D)."""
    return np.outer(x_hat @ params.dt_down, params.dt_up) + params.dt_bias


def compute_ssm_params(x_hat: np.ndarray, params: S6Params,
                       delta_shift: float = 0.0) -> DiscreteSystem:
    """Discretize the selective system for input ``x_hat`` (L, D).

    ``delta_shift`` is added to the step pre-activation; it exists to probe
    the softplus -> ReLU simplification and is zero in normal use.
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x_hat.ndim != 2 or x_hat.shape[1] != params.channels:
        raise ValueError(f"x_hat must be (L, {params.channels}), got {x_hat.shape}")
    if not np.all(np.isfinite(x_hat)):
        raise ValueError("x_hat contains non-finite values")
    delta_pre = delta_projection(x_hat, params) + delta_shift
    delta = softplus(delta_pre)
    B = x_hat @ params.W_B
    C = x_hat @ params.W_C
    A_bar = np.exp(delta[:, :, None] * params.A[None, :, :])
    B_bar = delta[:, :, None] * B[:, None, :]
    return DiscreteSystem(A_bar=A_bar, B_bar=B_bar, C=C, delta=delta,
                          delta_pre=delta_pre, B=B)


def linear_recurrence(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sequential ``h_t = a_t * h_{t-1} + b_t`` with ``h_0 = 0`` along axis 0."""
    h = np.empty_like(b, dtype=np.float64)
    state = np.zeros(b.shape[1:], dtype=np.float64)
    for t in range(b.shape[0]):
        state = a[t] * state + b[t]
        h[t] = state
    return h


def linear_recurrence_parallel(a: np.ndarray, b: np.ndarray,
                               return_steps: bool = False):
    """Blelloch (up-sweep / down-sweep) scan of the same recurrence.

    Elements are affine maps ``h -> a h + b``; ``(a2, b2) o (a1, b1) =
    (a2 a1, a2 b1 + b2)`` is associative with identity ``(1, 0)``. Each sweep
    level is one vectorized step, giving ``2 * ceil(log2 L)`` levels.
    """
    L = b.shape[0]
    if L == 0:
        return (np.empty_like(b), 0) if return_steps else np.empty_like(b)
    n = 1 << (L - 1).bit_length()
    A = np.ones((n,) + b.shape[1:])
    B = np.zeros((n,) + b.shape[1:])
    A[:L] = a
    B[:L] = b
    steps = 0

    d = 1
    while d < n:
        right = np.arange(2 * d - 1, n, 2 * d)
        left = right - d
        B[right] = A[right] * B[left] + B[right]
        A[right] = A[right] * A[left]
        d *= 2
        steps += 1

    A[n - 1], B[n - 1] = 1.0, 0.0
    d = n // 2
    while d >= 1:
        right = np.arange(2 * d - 1, n, 2 * d)
        left = right - d
        # right <- (prefix at right) followed by (left subtree total)
        pa, pb = A[right].copy(), B[right].copy()
        sa, sb = A[left].copy(), B[left].copy()
        A[left], B[left] = pa, pb
        A[right] = sa * pa
        B[right] = sa * pb + sb
        d //= 2
        steps += 1

    # exclusive prefix applied to h_0 = 0 leaves B; fold in element t itself
    h = a * B[:L] + b
    return (h, steps) if return_steps else h


def _check_scan_shapes(x: np.ndarray, sys: DiscreteSystem) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    L, D, N = sys.A_bar.shape
    if x.shape != (L, D):
        raise ValueError(f"x has shape {x.shape}, system expects ({L}, {D})")
    if sys.B_bar.shape != (L, D, N) or sys.C.shape != (L, N):
        raise ValueError("inconsistent DiscreteSystem shapes")
    return x


def scan_states(x: np.ndarray, sys: DiscreteSystem, method: str = "recurrent") -> np.ndarray:
    """Hidden states ``h`` of shape (L, D, N)."""
    x = _check_scan_shapes(x, sys)
    drive = sys.B_bar * x[:, :, None]
    if method == "recurrent":
        return linear_recurrence(sys.A_bar, drive)
    if method == "parallel":
        return linear_recurrence_parallel(sys.A_bar, drive)
    raise ValueError(f"unknown scan method {method!r}")


def readout(h: np.ndarray, C: np.ndarray) -> np.ndarray:
    # explicit m = 1..N accumulation keeps the sum order fixed
    y = np.zeros(h.shape[:2])
    for m in range(h.shape[2]):
        y += C[:, None, m] * h[:, :, m]
    return y


def scan_recurrent(x: np.ndarray, sys: DiscreteSystem) -> np.ndarray:
    """``y_t = C_t h_t`` with ``h_t = A_bar_t h_{t-1} + B_bar_t x_t``, output (L, D)."""
    return readout(scan_states(x, sys, "recurrent"), sys.C)


def scan_parallel(x: np.ndarray, sys: DiscreteSystem) -> np.ndarray:
    return readout(scan_states(x, sys, "parallel"), sys.C)
