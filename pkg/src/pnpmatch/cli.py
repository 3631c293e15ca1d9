"""Command-line entry point: ``pnpmatch <command> [options]``.

Failures exit with status 1 and print one line to stderr of the form
``pnpmatch: error: kind=<ExceptionName> message=<json string>``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .encoder import TrainConfig, predict, train
from .exceptions import PNPError
from .experiment import (
    DatasetManifest,
    Predictions,
    ensure_writable,
    eval_table,
    evaluate_predictions,
    load_split,
    make_dataset,
    make_metrics,
    report_eigs,
    report_tau,
    worker_count,
    write_eval_table,
)
from .ftm import NormalizedTheta, read_wav
from .matcher import MatchOptions, match
from .metric import FD_STEP, cache_read


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_dataset(args):
    m = make_dataset(args.n, args.seed, args.out, args.pitch_mode, args.overwrite,
                     workers=args.workers or worker_count())
    counts = {s: len(m.entries(s)) for s in ("train", "val", "test")}
    print(f"dataset n={m.n} train={counts['train']} val={counts['val']} test={counts['test']} "
          f"redrawn={m.n_redrawn}")


def cmd_metrics(args):
    manifest = DatasetManifest.load(args.manifest)
    splits = tuple(s.strip() for s in args.splits.split(","))
    records, failures = make_metrics(manifest, args.out, args.feature_map, args.fd_step, splits,
                                     args.workers or worker_count(), args.overwrite)
    for sid, msg in failures:
        _log(f"metric failure sample={sid}: {msg}")
    print(f"metrics records={len(records)} failures={len(failures)}")


def _config_from_args(args):
    base = TrainConfig.load(args.config) if args.config else TrainConfig()
    kw = {}
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            kw[f.name] = tuple(v) if f.name == "hidden" else v
    return TrainConfig(**{**{f.name: getattr(base, f.name) for f in fields(TrainConfig)}, **kw})


def cmd_train(args):
    manifest = DatasetManifest.load(args.manifest)
    config = _config_from_args(args)
    if config.J != (4 if manifest.pitch_mode == "known" else 5):
        raise PNPError(f"config pitch_mode={config.pitch_mode!r} does not match dataset "
                       f"pitch_mode={manifest.pitch_mode!r}")
    out = Path(args.out_dir)
    ensure_writable(out / "weights.pnpw", args.overwrite)
    out.mkdir(parents=True, exist_ok=True)
    targets = config.loss == "spectral_fd"
    tr = load_split(manifest, "train", with_targets=targets)
    va = load_split(manifest, "val", with_targets=targets)
    metrics = cache_read(args.metrics) if args.metrics else None
    progress = (lambda row: _log(f"epoch {row['epoch']} train={row['train_loss']:.6g} "
                                 f"val={row['val_loss']:.6g} lambda={row['lam']:.6g}")) if args.verbose else None
    result = train(tr, va, config, metrics=metrics, progress=progress)
    config.save(out / "config.txt")
    result.weights.save(out / "weights.pnpw")
    result.write_log(out / "train_log.csv")
    te = load_split(manifest, "test")
    wall = float(np.mean([r["wall_clock"] for r in result.log])) if result.log else 0.0
    meta = {"loss": config.loss, "phi": "jtfs", "pitch": config.pitch_mode, "seed": config.seed,
            "wall_clock_per_epoch": repr(wall)}
    Predictions(te.ids, predict(result.weights, te.X, config.bn_eps), meta).save(out / "predictions.csv")
    print(f"train epochs={len(result.log)} best_epoch={result.best_epoch} out={out}")


def cmd_match(args):
    target = read_wav(args.target)
    if args.peak is not None:
        peak = float(np.max(np.abs(target.samples)))
        if peak > 0:
            target = type(target)(target.samples * (args.peak / peak), target.sample_rate)
    init = [float(x) for x in args.init.split(",")]
    theta0 = NormalizedTheta(init, args.pitch) if args.pitch is not None else NormalizedTheta(init)
    opts = MatchOptions(lambda0=args.lambda0, fd_step=args.fd_step, fd_step_min=args.fd_step_min,
                        max_iter=args.max_iter)
    out = ensure_writable(args.out, args.overwrite) if args.out else None
    res = match(target, theta0, args.feature_map, opts)
    text = res.to_text()
    if out:
        out.write_text(text)
    else:
        sys.stdout.write(text)


def cmd_eval(args):
    manifest = DatasetManifest.load(args.manifest)
    out = ensure_writable(args.out, args.overwrite)
    runs = []
    for path in args.predictions:
        p = Predictions.load(path)
        jd, md = evaluate_predictions(manifest, p, args.split)
        runs.append({"loss": p.meta.get("loss", "unknown"), "phi": p.meta.get("phi", "jtfs"),
                     "pitch": p.meta.get("pitch", manifest.pitch_mode), "jtfs": jd, "mss": md,
                     "wall_clock": float(p.meta.get("wall_clock_per_epoch", "nan"))})
    write_eval_table(eval_table(runs), out)
    print(f"eval runs={len(runs)} out={out}")


def cmd_report_eigs(args):
    out = ensure_writable(args.out, args.overwrite)
    report_eigs(cache_read(args.metrics), out)
    print(f"report-eigs out={out}")


def cmd_report_tau(args):
    out = ensure_writable(args.out, args.overwrite)
    manifest = DatasetManifest.load(args.manifest)
    preds = {}
    for item in args.predictions:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).parent.name or Path(item).stem, item
        preds[name] = Predictions.load(path)
    report_tau(manifest, cache_read(args.metrics), preds, out, n_bins=args.bins, seed=args.seed)
    print(f"report-tau out={out}")


def build_parser():
    p = argparse.ArgumentParser(prog="pnpmatch", description="Drum sound matching with the PNP loss.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        return sp

    sp = common(sub.add_parser("dataset", help="render a random dataset"))
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--pitch-mode", choices=("unknown", "known"), default="unknown")
    sp.add_argument("--workers", type=int, default=0, help="defaults to $PNP_WORKERS or 1")
    sp.set_defaults(func=cmd_dataset)

    sp = common(sub.add_parser("metrics", help="precompute the metric cache"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--feature-map", default="jtfs", choices=("jtfs", "mss"))
    sp.add_argument("--fd-step", type=float, default=FD_STEP)
    sp.add_argument("--splits", default="train,val,test")
    sp.add_argument("--workers", type=int, default=0, help="defaults to $PNP_WORKERS or 1")
    sp.set_defaults(func=cmd_metrics)

    sp = common(sub.add_parser("train", help="train the encoder"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--metrics")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--config", help="key=value file; flags override it")
    sp.add_argument("--verbose", action="store_true")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "hidden":
            sp.add_argument(flag, type=int, nargs="+")
        elif f.name in ("loss", "pitch_mode"):
            sp.add_argument(flag)
        else:
            sp.add_argument(flag, type=type(f.default))
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("match", help="fit parameters to a target WAV"))
    sp.add_argument("--target", required=True)
    sp.add_argument("--init", required=True, help="comma-separated normalized parameters")
    sp.add_argument("--pitch", type=float, help="known normalized pitch (4-parameter init)")
    sp.add_argument("--peak", type=float, help="restore this peak amplitude before analysis")
    sp.add_argument("--feature-map", default="jtfs", choices=("jtfs", "mss"))
    sp.add_argument("--lambda0", type=float, default=-1.0)
    sp.add_argument("--fd-step", type=float, default=MatchOptions.fd_step,
                    help="initial difference step; divided by 5 on each stall")
    sp.add_argument("--fd-step-min", type=float, default=FD_STEP)
    sp.add_argument("--max-iter", type=int, default=200)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_match)

    sp = common(sub.add_parser("eval", help="Table-style evaluation of predictions"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--predictions", nargs="+", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("report-eigs", help="eigenvalue distribution CSV"))
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report_eigs)

    sp = common(sub.add_parser("report-tau", help="tau error histograms by metric stiffness"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--predictions", nargs="+", required=True, help="[name=]path")
    sp.add_argument("--bins", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report_tau)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        args.func(args)
    except (PNPError, ValueError, OSError) as exc:
        print(f"pnpmatch: error: kind={type(exc).__name__} message={json.dumps(str(exc))}", file=sys.stderr)
        return 1
    _log(f"done in {time.perf_counter() - t0:.2f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
