"""Mamba block and a stacked token classifier with a CLS token.

Block (post-norm, as in the original formulation)::

    x_hat = SiLU(Conv1D(x' W_x))      z = SiLU(x' W_z)
    y'    = (SSM(x_hat) * z) W_out    y = LayerNorm(y' + x')

Weights live in f64 in memory and are stored as f32 in bundles under
``layer{l}.{param}`` (``l`` counted from 1), ``cls_token``, ``head.weight``
and ``head.bias``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .attention_view import materialize_all, reverse_direction
from .ssm_core import (DiscreteSystem, S6Params, compute_ssm_params, init_s6_params,
                       readout, scan_states, silu)
from .tensor_io import ModelConfig, TensorBundle

LN_EPS = 1e-5


@dataclass
class BlockParams:
    in_proj_x: np.ndarray  # (D_model, D)
    in_proj_z: np.ndarray  # (D_model, D)
    conv_weight: np.ndarray  # (D, k); last tap multiplies the current step
    conv_bias: np.ndarray  # (D,)
    ssm: S6Params
    out_proj: np.ndarray  # (D, D_model)
    norm_scale: np.ndarray  # (D_model,)
    norm_bias: np.ndarray  # (D_model,)
    # backward-direction branch, only for bidirectional models
    conv_weight_bwd: np.ndarray | None = None
    conv_bias_bwd: np.ndarray | None = None
    ssm_bwd: S6Params | None = None

    @property
    def bidirectional(self) -> bool:
        return self.ssm_bwd is not None


@dataclass
class ModelWeights:
    cls_token: np.ndarray  # (D_model,)
    layers: list[BlockParams]
    head_weight: np.ndarray  # (D_model, num_classes)
    head_bias: np.ndarray  # (num_classes,)


@dataclass
class BlockCache:
    u: np.ndarray  # block input x'
    xl: np.ndarray
    xc: np.ndarray
    x_hat: np.ndarray
    zl: np.ndarray
    z: np.ndarray
    sys: DiscreteSystem
    h: np.ndarray
    ssm_out: np.ndarray  # sum of both directions when bidirectional
    gated: np.ndarray
    y_prime: np.ndarray
    resid: np.ndarray
    ln_mean: np.ndarray
    ln_rstd: np.ndarray
    y: np.ndarray
    # backward direction, stored in reversed time order
    xc_bwd: np.ndarray | None = None
    x_hat_bwd: np.ndarray | None = None
    sys_bwd: DiscreteSystem | None = None
    h_bwd: np.ndarray | None = None


@dataclass
class ModelState:
    config: ModelConfig
    tokens: np.ndarray  # input sequence with CLS inserted, (L', D_model)
    cls_index: int | None
    layers: list[BlockCache] = field(default_factory=list)
    pooled: np.ndarray | None = None
    logits: np.ndarray | None = None
    weights: "ModelWeights | None" = None

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[0]

    def output(self, layer: int) -> np.ndarray:
        """Sequence after ``layer`` blocks (0 = embedded input)."""
        return self.tokens if layer == 0 else self.layers[layer - 1].y


# ---------------------------------------------------------------- primitives

def causal_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Depthwise causal convolution with left zero padding."""
    L = x.shape[0]
    k = weight.shape[1]
    xp = np.concatenate([np.zeros((k - 1, x.shape[1])), x], axis=0)
    out = np.zeros_like(x, dtype=np.float64)
    for s in range(k):
        out += weight[:, s] * xp[s : s + L]
    return out + bias


def layer_norm(x: np.ndarray, scale: np.ndarray, bias: np.ndarray, eps: float = LN_EPS):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return (x - mean) * rstd * scale + bias, mean, rstd


def selective_ssm(x_hat: np.ndarray, params: S6Params, method: str = "recurrent"):
    """S6 sub-layer: returns ``(y, sys, h)``."""
    sys = compute_ssm_params(x_hat, params)
    h = scan_states(x_hat, sys, method)
    return readout(h, sys.C), sys, h


def bidirectional_ssm(x_hat: np.ndarray, fwd: S6Params, bwd: S6Params) -> np.ndarray:
    """Forward scan plus time-reversed backward scan on the same input."""
    y_f, _, _ = selective_ssm(x_hat, fwd)
    y_b, _, _ = selective_ssm(x_hat[::-1], bwd)
    return y_f + y_b[::-1]


# ---------------------------------------------------------------- forward

def block_forward(u: np.ndarray, p: BlockParams) -> tuple[np.ndarray, BlockCache]:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[1] != p.in_proj_x.shape[0]:
        raise ValueError(f"block input must be (L, {p.in_proj_x.shape[0]}), got {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("block input contains non-finite values")
    xl = u @ p.in_proj_x
    xc = causal_conv(xl, p.conv_weight, p.conv_bias)
    x_hat = silu(xc)
    zl = u @ p.in_proj_z
    z = silu(zl)
    ssm_out, sys, h = selective_ssm(x_hat, p.ssm)

    extra = {}
    if p.bidirectional:
        xc_b = causal_conv(xl[::-1], p.conv_weight_bwd, p.conv_bias_bwd)
        x_hat_b = silu(xc_b)
        y_b, sys_b, h_b = selective_ssm(x_hat_b, p.ssm_bwd)
        ssm_out = ssm_out + y_b[::-1]
        extra = dict(xc_bwd=xc_b, x_hat_bwd=x_hat_b, sys_bwd=sys_b, h_bwd=h_b)

    gated = ssm_out * z
    y_prime = gated @ p.out_proj
    resid = y_prime + u
    y, mean, rstd = layer_norm(resid, p.norm_scale, p.norm_bias)
    cache = BlockCache(u=u, xl=xl, xc=xc, x_hat=x_hat, zl=zl, z=z, sys=sys, h=h,
                       ssm_out=ssm_out, gated=gated, y_prime=y_prime, resid=resid,
                       ln_mean=mean, ln_rstd=rstd, y=y, **extra)
    return y, cache


def block_from_y_prime(y_prime: np.ndarray, u: np.ndarray, p: BlockParams) -> np.ndarray:
    """Finish a block from a (possibly perturbed) ``y'``."""
    return layer_norm(y_prime + u, p.norm_scale, p.norm_bias)[0]


def cls_index(num_tokens: int, position: str) -> int | None:
    return {"none": None, "first": 0, "middle": num_tokens // 2, "last": num_tokens}[position]


def insert_cls(tokens: np.ndarray, cls_token: np.ndarray, position: str):
    idx = cls_index(tokens.shape[0], position)
    if idx is None:
        return np.asarray(tokens, dtype=np.float64), None
    seq = np.insert(np.asarray(tokens, dtype=np.float64), idx, cls_token, axis=0)
    return seq, idx


def pool(y: np.ndarray, idx: int | None) -> np.ndarray:
    # without a CLS token the head reads the token mean
    return y.mean(axis=0) if idx is None else y[idx]


def head(pooled: np.ndarray, weights: ModelWeights) -> np.ndarray:
    return pooled @ weights.head_weight + weights.head_bias


def check_weights(config: ModelConfig, weights: ModelWeights) -> None:
    Dm, D, N, k = config.channels, config.inner, config.state_size, config.conv_kernel
    problems = []
    if len(weights.layers) != config.num_layers:
        problems.append(f"{len(weights.layers)} layers, config says {config.num_layers}")
    if weights.cls_token.shape != (Dm,):
        problems.append(f"cls_token {weights.cls_token.shape}")
    if weights.head_weight.shape != (Dm, config.num_classes):
        problems.append(f"head.weight {weights.head_weight.shape}")
    if weights.head_bias.shape != (config.num_classes,):
        problems.append(f"head.bias {weights.head_bias.shape}")
    for i, p in enumerate(weights.layers, start=1):
        for name, arr in block_param_items(p):
            want = _param_shape(name, Dm, D, N, k)
            if arr.shape != want:
                problems.append(f"layer{i}.{name} {arr.shape} != {want}")
        if p.bidirectional != config.bidirectional:
            problems.append(f"layer{i}: bidirectional weights do not match config")
    if problems:
        raise ValueError("config/weight mismatch: " + "; ".join(problems))


def model_forward(tokens: np.ndarray, config: ModelConfig, weights: ModelWeights) -> ModelState:
    """Run the stacked model on one pre-embedded sequence (L, D_model)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != config.channels:
        raise ValueError(f"tokens must be (L, {config.channels}), got {tokens.shape}")
    check_weights(config, weights)
    seq, idx = insert_cls(tokens, weights.cls_token, config.cls_position)
    state = ModelState(config=config, tokens=seq, cls_index=idx, weights=weights)
    x = seq
    for p in weights.layers:
        x, cache = block_forward(x, p)
        state.layers.append(cache)
    state.pooled = pool(x, idx)
    state.logits = head(state.pooled, weights)
    return state


def layer_attention(state: ModelState, layer: int) -> np.ndarray:
    """Per-channel hidden attention of block ``layer`` (1-based), (D, L', L').

    Bidirectional blocks return the sum of both directions.
    """
    c = state.layers[layer - 1]
    alpha = materialize_all(c.sys)
    if c.sys_bwd is not None:
        alpha = alpha + reverse_direction(materialize_all(c.sys_bwd))
    return alpha


# ---------------------------------------------------------------- weights

_S6_NAMES = ("A", "W_B", "W_C", "dt_down", "dt_up", "dt_bias")


def _param_shape(name: str, Dm: int, D: int, N: int, k: int) -> tuple:
    base = name.split(".")[-1]
    return {
        "in_proj_x": (Dm, D), "in_proj_z": (Dm, D), "conv_weight": (D, k),
        "conv_bias": (D,), "out_proj": (D, Dm), "norm_scale": (Dm,), "norm_bias": (Dm,),
        "conv_weight_bwd": (D, k), "conv_bias_bwd": (D,),
        "A": (D, N), "W_B": (D, N), "W_C": (D, N),
        "dt_down": (D,), "dt_up": (D,), "dt_bias": (D,),
    }[base]


def block_param_items(p: BlockParams):
    for f in fields(p):
        val = getattr(p, f.name)
        if val is None:
            continue
        if isinstance(val, S6Params):
            for n in _S6_NAMES:
                yield f"{f.name}.{n}", getattr(val, n)
        else:
            yield f.name, val


def init_weights(config: ModelConfig, seed: int, scale: float = 0.1) -> ModelWeights:
    """Seeded synthetic weights: uniform(-scale, scale), S4D-real ``A``, unit norm scale."""
    rng = np.random.default_rng(seed)
    Dm, D, N, k = config.channels, config.inner, config.state_size, config.conv_kernel
    u = lambda *shape: rng.uniform(-scale, scale, size=shape)
    cls_token = u(Dm)
    layers = []
    for _ in range(config.num_layers):
        p = BlockParams(
            in_proj_x=u(Dm, D), in_proj_z=u(Dm, D), conv_weight=u(D, k), conv_bias=u(D),
            ssm=init_s6_params(rng, D, N, scale), out_proj=u(D, Dm),
            norm_scale=np.ones(Dm), norm_bias=np.zeros(Dm),
        )
        if config.bidirectional:
            p.conv_weight_bwd = u(D, k)
            p.conv_bias_bwd = u(D)
            p.ssm_bwd = init_s6_params(rng, D, N, scale)
        layers.append(p)
    return ModelWeights(cls_token=cls_token, layers=layers,
                        head_weight=u(Dm, config.num_classes), head_bias=u(config.num_classes))


def weights_to_bundle(weights: ModelWeights, dtype=np.float32) -> TensorBundle:
    b = TensorBundle()
    b.add("cls_token", weights.cls_token.astype(dtype))
    for i, p in enumerate(weights.layers, start=1):
        for name, arr in block_param_items(p):
            b.add(f"layer{i}.{name}", np.asarray(arr).astype(dtype))
    b.add("head.weight", weights.head_weight.astype(dtype))
    b.add("head.bias", weights.head_bias.astype(dtype))
    return b


def weights_from_bundle(bundle, config: ModelConfig) -> ModelWeights:
    def get(name):
        if name not in bundle:
            raise ValueError(f"weights bundle is missing {name!r}")
        return np.asarray(bundle[name], dtype=np.float64)

    def s6(prefix):
        return S6Params(**{n: get(f"{prefix}.{n}") for n in _S6_NAMES})

    layers = []
    for i in range(1, config.num_layers + 1):
        pre = f"layer{i}"
        p = BlockParams(
            in_proj_x=get(f"{pre}.in_proj_x"), in_proj_z=get(f"{pre}.in_proj_z"),
            conv_weight=get(f"{pre}.conv_weight"), conv_bias=get(f"{pre}.conv_bias"),
            ssm=s6(f"{pre}.ssm"), out_proj=get(f"{pre}.out_proj"),
            norm_scale=get(f"{pre}.norm_scale"), norm_bias=get(f"{pre}.norm_bias"),
        )
        if config.bidirectional:
            p.conv_weight_bwd = get(f"{pre}.conv_weight_bwd")
            p.conv_bias_bwd = get(f"{pre}.conv_bias_bwd")
            p.ssm_bwd = s6(f"{pre}.ssm_bwd")
        layers.append(p)
    w = ModelWeights(cls_token=get("cls_token"), layers=layers,
                     head_weight=get("head.weight"), head_bias=get("head.bias"))
    check_weights(config, w)
    return w
