"""Built-in invariant suites on seeded synthetic instances."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attention_view import apply_alpha, materialize_all
from .gradients import GradientRequest, backward
from .model import block_forward, block_from_y_prime, head, init_weights, model_forward, pool
from .ssm_core import (DiscreteSystem, compute_ssm_params, init_s6_params, scan_parallel,
                       scan_recurrent, scan_states)
from .tensor_io import ModelConfig
from . import theory


def max_rel_err(got, want) -> float:
    """``max |got - want| / (max |want| + 1e-12)``."""
    got, want = np.asarray(got, dtype=np.float64), np.asarray(want, dtype=np.float64)
    return float(np.max(np.abs(got - want), initial=0.0) / (np.max(np.abs(want), initial=0.0) + 1e-12))


def random_instance(rng: np.random.Generator, L: int, D: int, N: int,
                    flip_a_sign: bool = False) -> tuple[np.ndarray, DiscreteSystem]:
    """Random input and its selective system; the input is also the scanned signal."""
    params = init_s6_params(rng, D, N, scale=1.0)
    if flip_a_sign:
        params.A = -params.A
    x = rng.normal(size=(L, D))
    return x, compute_ssm_params(x, params)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SelfcheckReport:
    suites: list[SuiteResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)


def _instances(seed: int, count: int, flip: bool, max_len: int = 16):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        L, D, N = int(rng.integers(1, max_len + 1)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        yield random_instance(rng, L, D, N, flip)


def suite_view_equivalence(flip: bool = False) -> SuiteResult:
    worst_par = worst_attn = 0.0
    for x, sys in _instances(1, 20, flip):
        y = scan_recurrent(x, sys)
        worst_par = max(worst_par, max_rel_err(scan_parallel(x, sys), y))
        alpha = materialize_all(sys)
        y_attn = np.stack([apply_alpha(alpha[d], x[:, d]) for d in range(x.shape[1])], axis=1)
        worst_attn = max(worst_attn, max_rel_err(y_attn, y))
    ok = worst_par < 1e-10 and worst_attn < 1e-10
    return SuiteResult("view_equivalence", ok,
                       f"parallel={worst_par:.2e} attention={worst_attn:.2e}")


def suite_causality(flip: bool = False) -> SuiteResult:
    bad = []
    for n, (x, sys) in enumerate(_instances(2, 20, flip)):
        alpha = materialize_all(sys)
        if np.any(np.triu(alpha, k=1) != 0):
            bad.append(f"instance {n}: nonzero above diagonal")
        L = x.shape[0]
        tau = L // 2
        x_cut = x.copy()
        x_cut[tau:] = 0.0
        if not np.array_equal(scan_recurrent(x_cut, sys)[:tau], scan_recurrent(x, sys)[:tau]):
            bad.append(f"instance {n}: future input changed past output")
    return SuiteResult("causality", not bad, "; ".join(bad) or "ok")


def suite_decay(flip: bool = False) -> SuiteResult:
    bad = []
    for n, (x, sys) in enumerate(_instances(3, 20, flip)):
        rho = float(sys.A_bar.max())
        if not (np.all(sys.A_bar > 0) and rho < 1):
            bad.append(f"instance {n}: A_bar outside (0, 1), max {rho:.3g}")
            continue
        impulse = np.zeros_like(x)
        impulse[0] = 1.0
        h = np.abs(scan_states(impulse, sys))
        bound = rho ** np.arange(len(h))[:, None, None] * h[:1]
        if np.any(h > bound * (1 + 1e-12)):
            bad.append(f"instance {n}: impulse response exceeds rho^(t-1) bound")
    return SuiteResult("decay", not bad, "; ".join(bad[:3]) or "ok")


def suite_gradients() -> SuiteResult:
    cfg = ModelConfig(num_layers=2, channels=4, state_size=2, conv_kernel=4,
                      cls_position="last", num_classes=2)
    w = init_weights(cfg, seed=7, scale=0.5)
    tokens = np.random.default_rng(7).normal(size=(6, 4))
    state = model_forward(tokens, cfg, w)
    worst = 0.0
    for layer in (1, 2):
        grad = backward(GradientRequest(0, layer, "y_prime", state))
        c = state.layers[layer - 1]

        def logit(yp):
            x = block_from_y_prime(yp, c.u, w.layers[layer - 1])
            for p in w.layers[layer:]:
                x, _ = block_forward(x, p)
            return head(pool(x, state.cls_index), w)[0]

        fd = np.zeros_like(c.y_prime)
        eps = 1e-5
        for idx in np.ndindex(fd.shape):
            hi, lo = c.y_prime.copy(), c.y_prime.copy()
            hi[idx] += eps
            lo[idx] -= eps
            fd[idx] = (logit(hi) - logit(lo)) / (2 * eps)
        worst = max(worst, max_rel_err(grad, fd))
    return SuiteResult("gradients", worst < 1e-4, f"max rel err vs finite differences {worst:.2e}")


def suite_theory() -> SuiteResult:
    problems = []
    mism = theory.count_channel_exhaustive(12)
    if any(mism.values()):
        problems.append(f"count-in-row mismatches {mism}")
    res = theory.head_infeasibility_residual()
    if abs(res - 1.0) > 1e-12:
        problems.append(f"closed-form residual {res}")
    for sm in (True, False):
        v, _, _ = theory.head_grid_min_violation(softmax=sm)
        if v < 0.2:
            problems.append(f"grid min violation {v} (softmax={sm})")
    head_res = max(theory.causal_head_channel_residual(np.random.default_rng(s)) for s in range(10))
    if head_res > 1e-12:
        problems.append(f"causal-head residual {head_res}")
    reports = {f: theory.mixer_probe(f) for f in theory.MIXER_FAMILIES}
    if reports["s4_fixed"].operator_changes:
        problems.append("fixed kernel depends on input")
    g = reports["gated_diagonal"]
    if not g.operator_changes or g.offdiag_max >= 1e-12:
        problems.append("gated mixer is not diagonal data-controlled")
    if not reports["selective"].data_controlled_nondiagonal:
        problems.append("selective mixer is not non-diagonal data-controlled")
    detail = "; ".join(problems) or (
        f"count-in-row exact to L=12, residual={res:.1f}, causal-head residual={head_res:.1e}")
    return SuiteResult("theory", not problems, detail)


def run_selfcheck(flip_a_sign: bool = False,
                  log: Callable[[str], None] | None = None) -> SelfcheckReport:
    """Run every suite. ``flip_a_sign`` injects a fault (positive ``A``)."""
    report = SelfcheckReport()
    suites = [
        lambda: suite_view_equivalence(flip_a_sign),
        lambda: suite_causality(flip_a_sign),
        lambda: suite_decay(flip_a_sign),
        suite_gradients,
        suite_theory,
    ]
    for fn in suites:
        res = fn()
        report.suites.append(res)
        if log:
            log(f"{'PASS' if res.passed else 'FAIL'} {res.name}: {res.detail}")
    return report
