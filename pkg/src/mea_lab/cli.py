"""Batch command-line interface.

Subcommands: check, fit-scaling, compress, profile-layers, train-toy, info.
Machine-readable JSON goes to stdout, human logs to stderr. Exit codes:
0 success, 1 check/selection failure, 2 usage error, 3 data or format
error. Every file-writing subcommand drops a `<first-output>.manifest.json`
recording the resolved configuration, inputs, outputs, seed, tool version
and wall-clock time; re-running the same invocation reproduces outputs
bit-exactly.
"""

from __future__ import annotations

import argparse
import glob as globmod
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

from mea_lab import __version__
from mea_lab import kernels as K
from mea_lab.attention import AttnConfig, ConfigError, Variant
from mea_lab.bundle import BundleError, read_manifest
from mea_lab.compress import build_plan, profile_layers
from mea_lab.corpus import KINDS, make_corpus
from mea_lab.equivalence import run_suite
from mea_lab.model import ModelConfig, load_model, save_model
from mea_lab.scaling import (
    DataError,
    LossCurve,
    SelectionError,
    fit_power_law,
    extrapolate,
    select_lr,
)
from mea_lab.tensor import ContractError
from mea_lab.train import TrainConfig, train

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DATA = 3

_VARIANT_FLAGS = {
    "mha": Variant.MHA_GQA,
    "gqa": Variant.MHA_GQA,
    "mqa": Variant.MHA_GQA,
    "tha": Variant.THA,
    "tha-mod": Variant.THA_MODIFIED,
    "dfa": Variant.DFA,
    "dfa-nogn": Variant.DFA_NO_GN,
    "mea": Variant.MEA,
    "mea-nogn": Variant.MEA_NO_GN,
}


def _threads() -> int:
    raw = os.environ.get("MEA_LAB_THREADS", "")
    try:
        if raw.strip():
            return max(1, int(raw))
    except ValueError:
        _log(f"ignoring non-integer MEA_LAB_THREADS={raw!r}")
    return os.cpu_count() or 1


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _write_manifest(args: argparse.Namespace, inputs: list[str],
                    outputs: list[str], t0: float) -> None:
    if not outputs:
        return
    config = {k: v for k, v in sorted(vars(args).items())
              if k != "func" and not k.startswith("_")}
    manifest = {
        "tool": "mea-lab",
        "version": __version__,
        "kernel_backend": K.BACKEND,
        "subcommand": args.subcommand,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": getattr(args, "seed", None),
        "wall_clock_s": round(time.time() - t0, 3),
    }
    path = outputs[0] + ".manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


# -- check ---------------------------------------------------------------------


def _cmd_check(args: argparse.Namespace) -> int:
    t0 = time.time()
    reports = run_suite(args.suite, args.trials, args.seed)
    payload = [r.to_dict() for r in reports]
    text = json.dumps(payload, indent=2)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        _write_manifest(args, [], [args.out], t0)
    failed = [r.name for r in reports if not r.passed]
    if failed:
        _log(f"FAILED checks: {', '.join(failed)}")
        return EXIT_CHECK_FAILED
    _log(f"all {len(reports)} checks passed in {time.time() - t0:.1f}s")
    return EXIT_OK


# -- fit-scaling -----------------------------------------------------------------


def _read_curve_csv(path: str) -> LossCurve:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty file")
    header = [c.strip().lower() for c in lines[0].split(",")]
    if "tokens" not in header or "loss" not in header:
        raise DataError(f"{path}: need 'tokens' and 'loss' columns, got {header}")
    ti, li = header.index("tokens"), header.index("loss")
    lr_i = header.index("lr") if "lr" in header else None
    points = []
    lr_peak = None
    for ln in lines[1:]:
        cells = ln.split(",")
        try:
            points.append((float(cells[ti]), float(cells[li])))
            if lr_i is not None:
                v = float(cells[lr_i])
                lr_peak = v if lr_peak is None else max(lr_peak, v)
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}: bad row {ln!r}") from exc
    return LossCurve(points=points, lr=lr_peak,
                     label=os.path.basename(path))


def _cmd_fit_scaling(args: argparse.Namespace) -> int:
    t0 = time.time()
    paths: list[str] = []
    for pattern in args.inputs:
        hits = sorted(globmod.glob(pattern))
        if hits:
            paths.extend(hits)
        elif os.path.exists(pattern):
            paths.append(pattern)
        else:
            raise DataError(f"no input matches {pattern!r}")
    curves = [_read_curve_csv(p) for p in paths]
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        fits = list(pool.map(fit_power_law, curves))

    horizon = args.horizon
    if horizon is None:
        horizon = 10.0 * max(max(c.tokens) for c in curves)
    result = {"horizon": horizon, "fits": []}
    for path, curve, fit in zip(paths, curves, fits):
        entry = {"file": path, "lr": curve.lr, **fit.to_dict()}
        if fit.converged:
            entry["extrapolated"] = extrapolate(fit, horizon)
        result["fits"].append(entry)

    exit_code = EXIT_OK
    with_lr = [c for c in curves if c.lr is not None]
    if len({c.lr for c in with_lr}) >= 2:
        try:
            selection = select_lr(with_lr, horizon=horizon,
                                  window=args.window,
                                  threshold=args.threshold)
            result["selection"] = selection.to_dict()
        except SelectionError as exc:
            result["selection"] = {"error": str(exc), **exc.report}
            exit_code = EXIT_CHECK_FAILED
    else:
        result["selection"] = None

    text = json.dumps(result, indent=2)
    print(text)
    outputs = []
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        outputs.append(args.out)
    if args.emit_plot:
        series = []
        markers = []
        for curve, fit in zip(curves, fits):
            label = (f"lr={curve.lr:g}" if curve.lr is not None else curve.label)
            lo, hi = min(curve.tokens), max(curve.tokens)
            pred = []
            for i in range(80):
                d = lo * (hi / lo) ** (i / 79.0) if hi > lo else lo
                pred.append((d, extrapolate(fit, d) if fit.converged else 0.0))
            series.append((label, pred))
            markers.append(("", curve.points))
        from mea_lab.plot import line_plot
        line_plot(series, args.emit_plot, title="fitted loss curves",
                  xlabel="training tokens", ylabel="loss", logx=True,
                  marker_series=markers)
        outputs.append(args.emit_plot)
    _write_manifest(args, paths, outputs, t0)
    return exit_code


# -- compress --------------------------------------------------------------------


def _cmd_compress(args: argparse.Namespace) -> int:
    t0 = time.time()
    cfg, params, plan = load_model(args.infile)
    if plan is not None:
        raise DataError(f"{args.infile} is already compressed")
    if cfg.attn.variant is not Variant.MHA_GQA:
        raise DataError("KV compression applies to baseline-variant models "
                        f"(got {cfg.attn.variant.value})")
    layer_ids = None
    if args.layers:
        layer_ids = sorted({int(v) for v in args.layers.split(",")})
        bad = [l for l in layer_ids if not 0 <= l < cfg.layers]
        if bad:
            raise DataError(f"layer ids {bad} out of range 0..{cfg.layers - 1}")
    plan = build_plan(cfg, params, args.heads, layer_ids)
    save_model(args.out, cfg, params, plan=plan)
    report = {
        "heads": plan.heads,
        "virtual_heads": plan.h_prime,
        "layers": [
            {
                "layer": layer,
                "k_error": comp.k_error(),
                "v_error": comp.v_error(),
                "k_discarded_sigma": comp.k_discarded,
                "v_discarded_sigma": comp.v_discarded,
            }
            for layer, comp in sorted(plan.layers.items())
        ],
    }
    print(json.dumps(report, indent=2))
    _write_manifest(args, [args.infile], [args.out], t0)
    return EXIT_OK


# -- profile-layers ---------------------------------------------------------------


def _cmd_profile_layers(args: argparse.Namespace) -> int:
    t0 = time.time()
    cfg, params, plan = load_model(args.model)
    if plan is not None:
        raise DataError("profiling expects an uncompressed model")
    if cfg.attn.variant is not Variant.MHA_GQA:
        raise DataError("layer profiling applies to baseline-variant models "
                        f"(got {cfg.attn.variant.value})")
    with open(args.data, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise DataError(f"{args.data}: empty corpus")
    tokens = list(raw[: args.limit_tokens]) if args.limit_tokens else list(raw)
    profile = profile_layers(cfg, params, tokens, args.heads,
                             seq_len=args.seq_len)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(profile.as_csv())
    outputs = [args.out]
    if args.emit_plot:
        from mea_lab.plot import line_plot
        pts = [(float(r.layer), r.delta) for r in profile.rows]
        line_plot([("ce delta", pts)], args.emit_plot,
                  title=f"layer sensitivity at {args.heads} virtual heads",
                  xlabel="compressed layer", ylabel="cross-entropy delta")
        outputs.append(args.emit_plot)
    _write_manifest(args, [args.model, args.data], outputs, t0)
    summary = {"baseline_ce": profile.rows[0].baseline_ce if profile.rows else None,
               "rows": len(profile.rows)}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


# -- train-toy --------------------------------------------------------------------


def _cmd_train_toy(args: argparse.Namespace) -> int:
    t0 = time.time()
    variant = _VARIANT_FLAGS[args.variant]
    heads = args.heads
    if args.variant == "mha":
        groups = heads
    elif args.variant == "mqa":
        groups = 1
    else:
        groups = args.groups if args.groups is not None else heads
    d_qk = args.d_qk if args.d_qk else args.d_model // heads
    d_v = args.d_v if args.d_v else args.d_model // heads
    acfg = AttnConfig(h=heads, g=groups, d_qk=d_qk, d_v=d_v,
                      d_model=args.d_model, h_prime=args.h_prime,
                      variant=variant, lambda_init=args.lambda_init)
    mcfg = ModelConfig(layers=args.layers, d_model=args.d_model, attn=acfg,
                       ffn_hidden=args.ffn_hidden or (8 * args.d_model) // 3,
                       max_seq=args.seq_len)
    tcfg = TrainConfig(lr_peak=args.lr, total_steps=args.steps,
                       warmup_steps=args.warmup, schedule=args.schedule,
                       decay_fraction=args.decay_fraction,
                       weight_decay=args.weight_decay,
                       batch_tokens=args.batch_tokens, seq_len=args.seq_len,
                       seed=args.seed, grad_clip=args.grad_clip)
    corpus = make_corpus(args.corpus, args.corpus_size, args.seed,
                         k=args.corpus_k)
    _log(f"training {args.variant} ({K.BACKEND} kernels), "
         f"{args.steps} steps, lr {args.lr:g}, seed {args.seed}")
    result = train(mcfg, tcfg, corpus, hlc_noise=args.hlc_noise,
                   train_hlc=not args.freeze_hlc, label=args.variant)
    with open(args.out_curve, "w", encoding="utf-8") as fh:
        fh.write(result.csv())
    outputs = [args.out_curve]
    if args.out_model:
        save_model(args.out_model, mcfg, result.params)
        outputs.append(args.out_model)
    _write_manifest(args, [], outputs, t0)
    summary = {
        "variant": args.variant,
        "steps_run": len(result.rows),
        "final_loss": result.rows[-1][2] if result.rows else None,
        "unstable": result.unstable,
        "spike_steps": result.spike_steps,
        "aborted_step": result.aborted_step,
        "wall_clock_s": round(time.time() - t0, 3),
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


# -- info -------------------------------------------------------------------------


def _cmd_info(args: argparse.Namespace) -> int:
    entries = read_manifest(args.bundle)
    print(json.dumps(entries, indent=2))
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mea-lab",
        description="numerical lab for head-mixing attention variants")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("check", help="run the equivalence/degeneration checks")
    p.add_argument("--suite", default="all",
                   choices=["all", "presoftmax", "dfa-tha", "postsoftmax",
                            "degeneration"])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="also write the JSON report here")
    p.set_defaults(func=_cmd_check)

    p = sub.add_parser("fit-scaling", help="fit loss curves and select an lr")
    p.add_argument("--in", dest="inputs", nargs="+", required=True,
                   metavar="CSV", help="curve CSVs (tokens,loss[,lr]); globs ok")
    p.add_argument("--horizon", type=float, default=None,
                   help="extrapolation token count (default 10x max observed)")
    p.add_argument("--out", default=None)
    p.add_argument("--emit-plot", default=None, metavar="SVG")
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--threshold", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_fit_scaling)

    p = sub.add_parser("compress", help="SVD-compress a model's KV heads")
    p.add_argument("--in", dest="infile", required=True, metavar="MODEL_TB")
    p.add_argument("--out", required=True, metavar="MODEL_TB")
    p.add_argument("--heads", type=int, required=True,
                   help="virtual heads to keep (H')")
    p.add_argument("--layers", default=None,
                   help="comma-separated layer ids (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("profile-layers",
                       help="per-layer loss sensitivity to KV compression")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="held-out byte corpus")
    p.add_argument("--heads", type=int, required=True)
    p.add_argument("--out", required=True, metavar="CSV")
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--limit-tokens", type=int, default=8192)
    p.add_argument("--emit-plot", default=None, metavar="SVG")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_profile_layers)

    p = sub.add_parser("train-toy", help="train the toy model on a synthetic corpus")
    p.add_argument("--variant", required=True, choices=sorted(_VARIANT_FLAGS))
    p.add_argument("--lr", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus", default="copy", choices=list(KINDS))
    p.add_argument("--corpus-size", type=int, default=200_000)
    p.add_argument("--corpus-k", type=int, default=2)
    p.add_argument("--out-curve", required=True, metavar="CSV")
    p.add_argument("--out-model", default=None, metavar="MODEL_TB")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--groups", type=int, default=None)
    p.add_argument("--h-prime", type=int, default=None)
    p.add_argument("--d-qk", type=int, default=None)
    p.add_argument("--d-v", type=int, default=None)
    p.add_argument("--ffn-hidden", type=int, default=None)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--batch-tokens", type=int, default=128)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--schedule", default="cosine", choices=["cosine", "constant"])
    p.add_argument("--decay-fraction", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=0.1)
    p.add_argument("--lambda-init", type=float, default=0.5)
    p.add_argument("--hlc-noise", type=float, default=0.02)
    p.add_argument("--freeze-hlc", action="store_true",
                   help="keep head-combination matrices fixed at init")
    p.add_argument("--grad-clip", type=float, default=None)
    p.set_defaults(func=_cmd_train_toy)

    p = sub.add_parser("info", help="list a bundle's tensors")
    p.add_argument("bundle")
    p.set_defaults(func=_cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (BundleError, DataError, FileNotFoundError, IsADirectoryError,
            PermissionError) as exc:
        _log(f"error: {exc}")
        return EXIT_DATA
    except (ConfigError, ContractError) as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
