"""Reverse-mode gradients through the fixed Mamba classifier topology.

Every primitive has a ``*_vjp`` taking the upstream cotangent and returning
cotangents for its inputs. The selective scan's adjoint is itself a linear
recurrence run backwards in time, ``lam_t = A_bar_{t+1} lam_{t+1} + dy_t C_t``,
and can be evaluated with either scan view.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BlockCache, BlockParams, ModelState
from .ssm_core import (DiscreteSystem, S6Params, linear_recurrence,
                       linear_recurrence_parallel, sigmoid)

# activations addressable inside a block, in forward order
BLOCK_ACTIVATIONS = ("input", "xl", "xc", "x_hat", "zl", "z", "ssm_out", "gated",
                     "y_prime", "resid", "output")


def silu_vjp(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return g * s * (1.0 + x * (1.0 - s))


def softplus_vjp(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * sigmoid(x)


def layer_norm_vjp(x: np.ndarray, mean: np.ndarray, rstd: np.ndarray, scale: np.ndarray,
                   g: np.ndarray):
    """Returns ``(dx, dscale, dbias)``."""
    xn = (x - mean) * rstd
    dxn = g * scale
    dx = rstd * (dxn - dxn.mean(axis=-1, keepdims=True)
                 - xn * (dxn * xn).mean(axis=-1, keepdims=True))
    return dx, (g * xn).sum(axis=0), g.sum(axis=0)


def causal_conv_vjp(x: np.ndarray, weight: np.ndarray, g: np.ndarray):
    """Returns ``(dx, dweight, dbias)`` for ``causal_conv``."""
    L, D = x.shape
    k = weight.shape[1]
    xp = np.concatenate([np.zeros((k - 1, D)), x], axis=0)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(weight, dtype=np.float64)
    for s in range(k):
        dxp[s : s + L] += weight[:, s] * g
        dw[:, s] = (g * xp[s : s + L]).sum(axis=0)
    return dxp[k - 1 :], dw, g.sum(axis=0)


def scan_vjp(x: np.ndarray, sys: DiscreteSystem, h: np.ndarray, dy: np.ndarray,
             method: str = "recurrent"):
    """Adjoint of ``y = readout(scan(x, sys))``.

    Returns ``(dx, dA_bar, dB_bar, dC)``.
    """
    L = x.shape[0]
    dC = np.einsum("td,tdm->tm", dy, h)
    drive = dy[:, :, None] * sys.C[:, None, :]
    # reversed time: the decay feeding step t comes from A_bar_{t+1}
    decay = np.concatenate([sys.A_bar[1:], np.ones_like(sys.A_bar[:1])], axis=0)
    solve = {"recurrent": linear_recurrence, "parallel": linear_recurrence_parallel}[method]
    lam = solve(decay[::-1], drive[::-1])[::-1]
    h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]], axis=0) if L else h
    dA_bar = lam * h_prev
    dB_bar = lam * x[:, :, None]
    dx = (lam * sys.B_bar).sum(axis=2)
    return dx, dA_bar, dB_bar, dC


def ssm_params_vjp(x_hat: np.ndarray, params: S6Params, sys: DiscreteSystem,
                   dA_bar: np.ndarray, dB_bar: np.ndarray, dC: np.ndarray):
    """Adjoint of ``compute_ssm_params``: returns ``(dx_hat, param_grads)``."""
    ddelta = (dA_bar * sys.A_bar * params.A[None]).sum(axis=2) \
        + (dB_bar * sys.B[:, None, :]).sum(axis=2)
    dA = (dA_bar * sys.A_bar * sys.delta[:, :, None]).sum(axis=0)
    dB = (dB_bar * sys.delta[:, :, None]).sum(axis=1)
    dpre = softplus_vjp(sys.delta_pre, ddelta)
    proj = x_hat @ params.dt_down
    dproj = dpre @ params.dt_up
    dx_hat = dB @ params.W_B.T + dC @ params.W_C.T + np.outer(dproj, params.dt_down)
    grads = S6Params(
        A=dA,
        W_B=x_hat.T @ dB,
        W_C=x_hat.T @ dC,
        dt_down=x_hat.T @ dproj,
        dt_up=dpre.T @ proj,
        dt_bias=dpre.sum(axis=0),
    )
    return dx_hat, grads


def selective_ssm_vjp(x_hat, params, sys, h, dy, method="recurrent"):
    """Total derivative of the S6 sub-layer output w.r.t. its input.

    ``x_hat`` enters both as the scanned signal and through the
    input-dependent system, so both paths are accumulated.
    """
    dx, dA_bar, dB_bar, dC = scan_vjp(x_hat, sys, h, dy, method)
    dx_sys, grads = ssm_params_vjp(x_hat, params, sys, dA_bar, dB_bar, dC)
    return dx + dx_sys, grads


def block_backward(cache: BlockCache, p: BlockParams, dy: np.ndarray,
                   method: str = "recurrent") -> dict[str, np.ndarray]:
    """Cotangents of every block activation given ``dL/dy`` at the block output."""
    g = {"output": dy}
    g["resid"], _, _ = layer_norm_vjp(cache.resid, cache.ln_mean, cache.ln_rstd,
                                      p.norm_scale, dy)
    g["y_prime"] = g["resid"]
    g["gated"] = g["y_prime"] @ p.out_proj.T
    g["ssm_out"] = g["gated"] * cache.z
    g["z"] = g["gated"] * cache.ssm_out
    g["zl"] = silu_vjp(cache.zl, g["z"])

    g["x_hat"], _ = selective_ssm_vjp(cache.x_hat, p.ssm, cache.sys, cache.h,
                                      g["ssm_out"], method)
    g["xc"] = silu_vjp(cache.xc, g["x_hat"])
    g["xl"], _, _ = causal_conv_vjp(cache.xl, p.conv_weight, g["xc"])

    if p.bidirectional:
        dy_b = g["ssm_out"][::-1]
        dxh_b, _ = selective_ssm_vjp(cache.x_hat_bwd, p.ssm_bwd, cache.sys_bwd,
                                     cache.h_bwd, dy_b, method)
        dxc_b = silu_vjp(cache.xc_bwd, dxh_b)
        dxl_rev, _, _ = causal_conv_vjp(cache.xl[::-1], p.conv_weight_bwd, dxc_b)
        g["xl"] = g["xl"] + dxl_rev[::-1]

    g["input"] = g["resid"] + g["xl"] @ p.in_proj_x.T + g["zl"] @ p.in_proj_z.T
    return g


@dataclass
class GradientRequest:
    """Gradient of ``logits[target_class]`` w.r.t. activation ``name`` of ``layer``.

    ``layer`` counts blocks from 1; ``layer=0`` with ``name="input"`` addresses
    the embedded tokens. ``name="logits"`` and ``name="pooled"`` ignore ``layer``.
    """

    target_class: int
    layer: int
    name: str
    state: ModelState


def logit_seed(state: ModelState, target_class: int) -> np.ndarray:
    n = state.config.num_classes
    if not 0 <= target_class < n:
        raise ValueError(f"target_class {target_class} out of range [0, {n})")
    seed = np.zeros(n)
    seed[target_class] = 1.0
    return seed


def backward_from_seed(state: ModelState, seed: np.ndarray, layer: int, name: str,
                       method: str = "recurrent") -> np.ndarray:
    """Vector-Jacobian product of ``seed . logits`` w.r.t. a cached activation."""
    if state.logits is None or state.weights is None:
        raise ValueError("missing forward cache; run model_forward first")
    if name == "logits":
        return np.array(seed, dtype=np.float64)
    w = state.weights
    dpooled = w.head_weight @ seed
    if name == "pooled":
        return dpooled
    n_layers = len(state.layers)
    if name not in BLOCK_ACTIVATIONS:
        raise KeyError(f"unknown activation {name!r}; expected one of {BLOCK_ACTIVATIONS}")
    if not 0 <= layer <= n_layers or (layer == 0 and name != "input"):
        raise KeyError(f"no activation {name!r} at layer {layer}")

    L = state.seq_len
    dy = np.zeros((L, state.config.channels))
    if state.cls_index is None:
        dy += dpooled / L
    else:
        dy[state.cls_index] = dpooled
    if layer == 0:
        for lam in range(n_layers, 0, -1):
            dy = block_backward(state.layers[lam - 1], w.layers[lam - 1], dy, method)["input"]
        return dy
    for lam in range(n_layers, layer - 1, -1):
        grads = block_backward(state.layers[lam - 1], w.layers[lam - 1], dy, method)
        if lam == layer:
            return grads[name]
        dy = grads["input"]
    raise AssertionError("unreachable")


def backward(req: GradientRequest, method: str = "recurrent") -> np.ndarray:
    seed = logit_seed(req.state, req.target_class)
    return backward_from_seed(req.state, seed, req.layer, req.name, method)
