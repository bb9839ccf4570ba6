import dataclasses

import numpy as np
import pytest

from mamba_xai.gradients import (BLOCK_ACTIVATIONS, GradientRequest, backward,
                                 backward_from_seed, causal_conv_vjp, layer_norm_vjp,
                                 scan_vjp, selective_ssm_vjp, silu_vjp, softplus_vjp)
from mamba_xai.model import causal_conv, layer_norm, model_forward, selective_ssm
from mamba_xai.selfcheck import max_rel_err, random_instance
from mamba_xai.ssm_core import (S6Params, init_s6_params, scan_recurrent, scan_states, silu,
                                softplus)

from conftest import tiny_model
from oracles import central_diff, directional_diff, logits_from_y_prime


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-12)


def check_vjp(f, vjp, x, rng, trials=3):
    """<vjp(g), v> against the directional derivative of <g, f(x)>."""
    g = rng.normal(size=np.shape(f(x)))
    gx = vjp(g)
    for _ in range(trials):
        v = rng.normal(size=x.shape)
        fd = directional_diff(lambda z: float(np.sum(g * f(z))), x, v)
        assert rel(float(np.sum(gx * v)), fd) < 1e-6


def test_silu_vjp(rng):
    x = rng.normal(size=(5, 3)) * 3
    check_vjp(silu, lambda g: silu_vjp(x, g), x, rng)


def test_softplus_vjp(rng):
    x = rng.normal(size=(5, 3)) * 3
    check_vjp(softplus, lambda g: softplus_vjp(x, g), x, rng)


def test_layer_norm_vjp(rng):
    x = rng.normal(size=(4, 6))
    scale, bias = rng.normal(size=6), rng.normal(size=6)
    _, mean, rstd = layer_norm(x, scale, bias)
    check_vjp(lambda z: layer_norm(z, scale, bias)[0],
              lambda g: layer_norm_vjp(x, mean, rstd, scale, g)[0], x, rng)
    g = rng.normal(size=x.shape)
    _, dscale, dbias = layer_norm_vjp(x, mean, rstd, scale, g)
    f = lambda s: float(np.sum(g * layer_norm(x, s, bias)[0]))
    np.testing.assert_allclose(dscale, central_diff(f, scale), rtol=1e-7)
    f = lambda b: float(np.sum(g * layer_norm(x, scale, b)[0]))
    np.testing.assert_allclose(dbias, central_diff(f, bias), rtol=1e-7)


def test_causal_conv_vjp(rng):
    x, w, b = rng.normal(size=(7, 3)), rng.normal(size=(3, 4)), rng.normal(size=3)
    check_vjp(lambda z: causal_conv(z, w, b), lambda g: causal_conv_vjp(x, w, g)[0], x, rng)
    check_vjp(lambda z: causal_conv(x, z, b), lambda g: causal_conv_vjp(x, w, g)[1], w, rng)
    check_vjp(lambda z: causal_conv(x, w, z), lambda g: causal_conv_vjp(x, w, g)[2], b, rng)


@pytest.mark.parametrize("method", ["recurrent", "parallel"])
def test_scan_vjp_signal_and_system(method, rng):
    x, sys = random_instance(rng, 9, 3, 2)
    h = scan_states(x, sys)
    grads = lambda g: scan_vjp(x, sys, h, g, method)
    check_vjp(lambda z: scan_recurrent(z, sys), lambda g: grads(g)[0], x, rng)
    for idx, field in ((1, "A_bar"), (2, "B_bar"), (3, "C")):
        f = lambda z, field=field: scan_recurrent(x, dataclasses.replace(sys, **{field: z}))
        check_vjp(f, lambda g, idx=idx: grads(g)[idx], getattr(sys, field), rng)


def test_selective_ssm_vjp_total_and_params(rng):
    params = init_s6_params(rng, 3, 2, scale=0.8)
    x = rng.normal(size=(6, 3))
    y, sys, h = selective_ssm(x, params)
    g = rng.normal(size=y.shape)
    dx, dparams = selective_ssm_vjp(x, params, sys, h, g)
    for _ in range(3):
        v = rng.normal(size=x.shape)
        fd = directional_diff(lambda z: float(np.sum(g * selective_ssm(z, params)[0])), x, v)
        assert rel(float(np.sum(dx * v)), fd) < 1e-6
    for name in ("A", "W_B", "W_C", "dt_down", "dt_up", "dt_bias"):
        p0 = getattr(params, name)
        f = lambda z, name=name: float(np.sum(
            g * selective_ssm(x, dataclasses.replace(params, **{name: z}))[0]))
        v = rng.normal(size=p0.shape)
        assert rel(float(np.sum(getattr(dparams, name) * v)), directional_diff(f, p0, v)) < 1e-6


@pytest.mark.parametrize("kw", [dict(), dict(cls_position="middle"), dict(cls_position="none"),
                                dict(bidirectional=True)])
def test_y_prime_gradient_matches_finite_differences(kw):
    cfg, w, x, state = tiny_model(**kw)
    for layer in (1, 2):
        for cls in range(cfg.num_classes):
            req = GradientRequest(target_class=cls, layer=layer, name="y_prime", state=state)
            fd = central_diff(lambda z: logits_from_y_prime(state, layer, z)[cls],
                              state.layers[layer - 1].y_prime)
            assert max_rel_err(backward(req), fd) < 1e-4


def test_input_gradient_matches_finite_differences():
    cfg, w, x, state = tiny_model(bidirectional=True, cls_position="first")
    fd = central_diff(lambda z: model_forward(z, cfg, w).logits[1], x)
    grad_seq = backward(GradientRequest(1, 0, "input", state))
    assert max_rel_err(np.delete(grad_seq, state.cls_index, axis=0), fd) < 1e-6


def test_logits_gradient_is_one_hot(tiny):
    _, _, _, state = tiny
    np.testing.assert_array_equal(backward(GradientRequest(1, 2, "logits", state)), [0.0, 1.0])


def test_adjoint_is_linear(tiny):
    cfg, w, x, state = tiny
    a, b = 0.7, -2.3
    for name in ("y_prime", "x_hat", "input"):
        g1 = backward(GradientRequest(0, 1, name, state))
        g2 = backward(GradientRequest(1, 1, name, state))
        mixed = backward_from_seed(state, np.array([a, b]), 1, name)
        assert np.max(np.abs(mixed - (a * g1 + b * g2))) <= 1e-12 * max(1.0, np.abs(mixed).max())


def test_recurrent_and_parallel_adjoints_agree():
    cfg, w, x, state = tiny_model(tokens=20, bidirectional=True)
    for name in BLOCK_ACTIVATIONS:
        r = backward(GradientRequest(0, 1, name, state), method="recurrent")
        p = backward(GradientRequest(0, 1, name, state), method="parallel")
        assert max_rel_err(p, r) < 1e-9


def test_single_zero_block_gradient():
    cfg, w, x, state = tiny_model(num_layers=1)
    p = w.layers[0]
    for f in dataclasses.fields(p):
        val = getattr(p, f.name)
        if isinstance(val, np.ndarray) and f.name not in ("norm_scale",):
            setattr(p, f.name, np.zeros_like(val))
    p.ssm = S6Params(A=p.ssm.A, **{n: np.zeros_like(getattr(p.ssm, n))
                                   for n in ("W_B", "W_C", "dt_down", "dt_up", "dt_bias")})
    state = model_forward(x, cfg, w)
    g = backward(GradientRequest(0, 1, "y_prime", state))
    assert np.all(np.isfinite(g))
    assert np.all(np.delete(g, state.cls_index, axis=0) == 0)
    fd = central_diff(lambda z: logits_from_y_prime(state, 1, z)[0], state.layers[0].y_prime)
    assert max_rel_err(g, fd) < 1e-6


def test_request_errors(tiny):
    _, _, _, state = tiny
    with pytest.raises(KeyError):
        backward(GradientRequest(0, 1, "attention", state))
    with pytest.raises(KeyError):
        backward(GradientRequest(0, 3, "y_prime", state))
    with pytest.raises(ValueError):
        backward(GradientRequest(5, 1, "y_prime", state))
    bare = dataclasses.replace(state, logits=None)
    with pytest.raises(ValueError):
        backward(GradientRequest(0, 1, "y_prime", bare))
