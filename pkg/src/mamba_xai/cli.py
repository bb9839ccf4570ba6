"""Command-line front end.

Exit codes: 0 success, 1 computational failure, 2 usage error. Reports go to
stdout (or ``--out``); logs go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from . import explain as xai
from . import metrics, theory
from .attention_view import materialize_alpha, reverse_direction
from .model import init_weights, model_forward, weights_from_bundle, weights_to_bundle
from .selfcheck import run_selfcheck
from .tensor_io import BundleError, ConfigError, TensorBundle, load_bundle, load_config, save_bundle, write_pgm

log = logging.getLogger("mamba_xai")


class UsageError(Exception):
    pass


def _existing(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"{what} file not found: {path}")
    return path


def _config(args):
    return load_config(_existing(args.config, "config"))


def _model(args):
    cfg = _config(args)
    weights = weights_from_bundle(load_bundle(_existing(args.weights, "weights")), cfg)
    return cfg, weights


def _tokens(args, name="tokens"):
    bundle = load_bundle(_existing(args.input, "input"))
    if name not in bundle:
        raise UsageError(f"input bundle has no {name!r} entry")
    return np.asarray(bundle[name], dtype=np.float64)


def _emit_json(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = _config(args)
    save_bundle(weights_to_bundle(init_weights(cfg, args.seed)), args.out)
    log.info("wrote %s", args.out)
    return 0


def cmd_forward(args) -> int:
    cfg, weights = _model(args)
    state = model_forward(_tokens(args), cfg, weights)
    line = ",".join(repr(float(v)) for v in state.logits)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(line + "\n")
    else:
        print(line)
    return 0


def cmd_dump_attn(args) -> int:
    cfg, weights = _model(args)
    state = model_forward(_tokens(args), cfg, weights)
    layers = [args.layer] if args.layer is not None else range(1, cfg.num_layers + 1)
    out = TensorBundle()
    for lam in layers:
        if not 1 <= lam <= cfg.num_layers:
            raise UsageError(f"--layer must be in 1..{cfg.num_layers}")
        c = state.layers[lam - 1]
        channels = [args.channel] if args.channel is not None else range(cfg.inner)
        for d in channels:
            if not 0 <= d < cfg.inner:
                raise UsageError(f"--channel must be in 0..{cfg.inner - 1}")
            fwd = materialize_alpha(c.sys, d, args.coordinate, layer=lam).alpha
            out.add(f"layer{lam}.channel{d}.forward", fwd)
            mats = [fwd]
            if c.sys_bwd is not None:
                bwd = reverse_direction(materialize_alpha(c.sys_bwd, d, args.coordinate).alpha)
                out.add(f"layer{lam}.channel{d}.backward", bwd)
                mats.append(bwd)
            if args.pgm_dir:
                os.makedirs(args.pgm_dir, exist_ok=True)
                write_pgm(sum(mats), os.path.join(args.pgm_dir, f"layer{lam}_channel{d}.pgm"))
    save_bundle(out, args.out)
    log.info("wrote %d matrices to %s", len(out), args.out)
    return 0


def cmd_explain(args) -> int:
    cfg, weights = _model(args)
    if not cfg.has_cls:
        raise UsageError("explain needs a config with a CLS token")
    if args.method == "attr" and args.target_class is None:
        raise UsageError("--class is required for --method attr")
    if args.target_class is not None and not 0 <= args.target_class < cfg.num_classes:
        raise UsageError(f"--class must be in 0..{cfg.num_classes - 1}")
    state = model_forward(_tokens(args), cfg, weights)
    rel = xai.explain(state, args.method, args.target_class)
    out = TensorBundle({"row": rel.row, "scores": rel.scores, "matrix": rel.matrix})
    if args.size:
        out.add("upsampled", rel.upsample(*args.size))
    save_bundle(out, args.out)
    if args.pgm:
        if args.size:
            img = out["upsampled"]
        elif math.isqrt(len(rel.scores)) ** 2 == len(rel.scores):
            img = rel.grid
        else:
            img = rel.scores[None, :]
        write_pgm(img, args.pgm)
    return 0


def cmd_eval_perturb(args) -> int:
    cfg, weights = _model(args)
    data = load_bundle(_existing(args.input, "input"))
    for key in ("tokens", "labels"):
        if key not in data:
            raise UsageError(f"input bundle needs a {key!r} entry")
    rel_bundle = load_bundle(_existing(args.relevance, "relevance"))
    if "scores" not in rel_bundle:
        raise UsageError("relevance bundle needs a 'scores' entry")
    predict = lambda x: model_forward(x, cfg, weights).logits
    curve = metrics.perturbation_curve(predict, data["tokens"], data["labels"].astype(int),
                                       rel_bundle["scores"], args.mode, metric=args.metric)
    _emit_json(curve.to_dict(), args.out)
    return 0


def cmd_eval_seg(args) -> int:
    heat = load_bundle(_existing(args.heatmap, "heatmap"))
    mask = load_bundle(_existing(args.mask, "mask"))
    h = heat[args.heatmap_entry] if args.heatmap_entry in heat else None
    m = mask["mask"] if "mask" in mask else None
    if h is None or m is None:
        raise UsageError(f"need '{args.heatmap_entry}' in heatmap bundle and 'mask' in mask bundle")
    if h.ndim == 2:
        h, m = h[None], m[None]
    scores = [metrics.segmentation_score(h[i], m[i]) for i in range(len(h))]
    report = {
        "per_image": [s.to_dict() for s in scores],
        "mean": {k: float(np.mean([getattr(s, k) for s in scores]))
                 for k in ("pixel_accuracy", "miou", "map")},
    }
    _emit_json(report, args.out)
    return 0


def cmd_eval_smooth(args) -> int:
    cfg, weights = _model(args)
    state = model_forward(_tokens(args), cfg, weights)
    _emit_json(metrics.oversmoothing_profile(state).to_dict(), args.out)
    return 0


def cmd_theory_check(args) -> int:
    ok = True

    def line(name, passed, detail):
        nonlocal ok
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")

    mism = theory.count_channel_exhaustive(12)
    line("count_in_row_channel", not any(mism.values()), f"mismatches by length {mism}")
    res = theory.head_infeasibility_residual()
    line("head_closed_form", abs(res - 1.0) <= 1e-12, f"residual={res!r}")
    for sm in (True, False):
        v, s, w = theory.head_grid_min_violation(softmax=sm)
        line(f"head_grid_{'softmax' if sm else 'linear'}", v >= 0.2,
             f"min violation={v:.4f} at qk={s:.2f} v={w:.2f}")
    head_res = max(theory.causal_head_channel_residual(np.random.default_rng(s)) for s in range(10))
    line("causal_head_as_channel", head_res <= 1e-12, f"residual={head_res:.2e}")
    for fam in theory.MIXER_FAMILIES:
        r = theory.mixer_probe(fam)
        expected = {"s4_fixed": not r.operator_changes,
                    "gated_diagonal": r.operator_changes and r.offdiag_max is not None
                    and r.offdiag_max < 1e-12,
                    "selective": r.data_controlled_nondiagonal}[fam]
        line(f"mixer_{fam}", expected,
             f"operator_changes={r.operator_changes} offdiag_max={r.offdiag_max}")
    return 0 if ok else 1


def cmd_selfcheck(args) -> int:
    report = run_selfcheck(flip_a_sign=args.inject_a_sign_fault, log=print)
    print("selfcheck:", "PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mamba-xai", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_args(sp, need_input=True):
        sp.add_argument("--config", required=True)
        sp.add_argument("--weights", required=True)
        if need_input:
            sp.add_argument("--input", required=True, help="bundle with a 'tokens' entry")

    sp = sub.add_parser("synth", help="write seeded synthetic weights")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", required=True, type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("forward", help="print logits as CSV")
    model_args(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_forward)

    sp = sub.add_parser("dump-attn", help="materialize hidden attention matrices")
    model_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--layer", type=int, help="1-based layer (default: all)")
    sp.add_argument("--channel", type=int, help="channel (default: all)")
    sp.add_argument("--coordinate", type=int, help="single state coordinate")
    sp.add_argument("--pgm-dir", help="also write one PGM heatmap per matrix")
    sp.set_defaults(func=cmd_dump_attn)

    sp = sub.add_parser("explain", help="relevance map for the CLS token")
    model_args(sp)
    sp.add_argument("--method", required=True, choices=("raw", "rollout", "attr"))
    sp.add_argument("--class", dest="target_class", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--pgm")
    sp.add_argument("--size", type=int, nargs=2, metavar=("H", "W"),
                    help="bilinear upsampling size (tokens must form a square grid)")
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("eval-perturb", help="positive/negative perturbation curve and AUC")
    model_args(sp)
    sp.add_argument("--relevance", required=True, help="bundle with 'scores' (n, L)")
    sp.add_argument("--mode", required=True, choices=("positive", "negative"))
    sp.add_argument("--metric", default="accuracy", choices=("accuracy", "logit"))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval_perturb)

    sp = sub.add_parser("eval-seg", help="pixel accuracy, mIoU and mAP of heatmaps")
    sp.add_argument("--heatmap", required=True)
    sp.add_argument("--heatmap-entry", default="upsampled")
    sp.add_argument("--mask", required=True, help="bundle with a 'mask' entry")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval_seg)

    sp = sub.add_parser("eval-smooth", help="per-layer mean pairwise cosine similarity")
    model_args(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval_smooth)

    sp = sub.add_parser("theory-check", help="run the expressiveness checks")
    sp.set_defaults(func=cmd_theory_check)

    sp = sub.add_parser("selfcheck", help="run the built-in invariant suites")
    sp.add_argument("--inject-a-sign-fault", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_selfcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.error(str(exc))
    except (BundleError, ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
