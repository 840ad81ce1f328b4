"""Command-line entry point: ``chdqr <command> [options]``.

Commands
--------
gen-data   write a synthetic dataset as CSV plus a provenance sidecar
train      fit a model; writes the checkpoint, a per-epoch log and the splits
calibrate  conformal calibration of a checkpoint on a CSV split
evaluate   coverage and PINAW of a calibrated checkpoint on a CSV split
suite      the full datasets x methods x alphas x seeds benchmark
predict    print the prediction region for one input

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure,
1 anything else. On failure one JSON line ``{"error": ..., "exit_code": ...}``
is written to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import CQRCalibration, CQRModel, CQRPredictor, cqr_predict
from .checkpoint import (atomic_write, dumps_json, load_calibration, load_checkpoint,
                         save_calibration, save_checkpoint)
from .config import (SuiteConfig, TrainConfig, apply_overrides, load_json_config)
from .conformal import DensityPredictor, DensityRegressor, calibrate, predict_region
from .data import DEFAULT_SIZES, SplitSpec, gen_uncond1d, gen_uncond2d, add_outliers, \
    load_csv, make_dataset, split, to_csv_text, DEFAULT_OUTLIERS
from .errors import ChdqrError, ConfigError, DataError
from .evaluation import MetricsReport, failures, run_suite, target_spread
from .geometry import voronoi_cells

log = logging.getLogger("chdqr")

GEN_DATASETS = ("uncond1d", "uncond2d", "uncond2d_outlier")


# ---------------------------------------------------------------- helpers

def git_revision() -> str | None:
    try:
        res = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return res.stdout.strip() or None if res.returncode == 0 else None


def write_stamp(out: Path, command: str, config: dict, argv) -> None:
    """Record the effective configuration and code version beside the outputs."""
    stamp = {"command": command, "argv": list(argv), "config": config,
             "version": __version__, "git": git_revision()}
    atomic_write(out / "run.json", dumps_json(stamp))


def _train_config(args) -> TrainConfig:
    base = load_json_config(args.config) if args.config else {}
    d = apply_overrides(base, args.set)
    if args.seed is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _fit(train, cfg: TrainConfig):
    from .baselines import cqr_fit, grid_fit
    from .training import fit

    if cfg.method == "cqr":
        return cqr_fit(train, cfg), []
    state = (grid_fit if cfg.method == "grid" else fit)(train, cfg)
    return DensityRegressor.from_state(state, cfg.method), state.history


def _predictor(model, calib):
    if isinstance(model, CQRModel):
        if not isinstance(calib, CQRCalibration):
            raise DataError("calibration kind 'density' does not match a CQR checkpoint")
        return CQRPredictor(model, calib)
    if isinstance(calib, CQRCalibration):
        raise DataError("calibration kind 'cqr' does not match a density checkpoint")
    return DensityPredictor(model, calib.q_hat)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    n = args.n or DEFAULT_SIZES[args.dataset]
    seed = 0 if args.seed is None else args.seed
    if args.dataset == "uncond1d":
        ds = gen_uncond1d(n, seed, args.variance_reading)
    else:
        ds = gen_uncond2d(n, seed)
        if args.dataset == "uncond2d_outlier":
            ds = add_outliers(ds, args.outliers if args.outliers is not None else DEFAULT_OUTLIERS,
                              seed)
    atomic_write(out / f"{args.dataset}.csv", to_csv_text(ds))
    atomic_write(out / f"{args.dataset}.provenance.json", dumps_json(ds.provenance))
    write_stamp(out, "gen-data", {"dataset": args.dataset, "n": n, "seed": seed,
                                  "outliers": args.outliers,
                                  "variance_reading": args.variance_reading}, sys.argv[1:])
    log.info("wrote %d rows to %s", len(ds), out / f"{args.dataset}.csv")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    cfg = _train_config(args)
    ds = make_dataset(cfg)
    parts = split(ds, SplitSpec(seed=cfg.seed))
    for part, name in zip(parts, ("train", "cal", "test")):
        atomic_write(out / f"{name}.csv", to_csv_text(part))
    train = load_csv(out / "train.csv", name="train")
    t0 = time.perf_counter()
    model, history = _fit(train, cfg)
    log.info("trained %s in %.1fs", cfg.method, time.perf_counter() - t0)
    save_checkpoint(out / "model.ckpt", model, cfg.to_dict(), cfg.config_hash())
    atomic_write(out / "train_log.jsonl",
                 "".join(json.dumps(h, sort_keys=True) + "\n" for h in history))
    write_stamp(out, "train", cfg.to_dict(), sys.argv[1:])
    return 0


def cmd_calibrate(args) -> int:
    out = Path(args.out)
    model, header = load_checkpoint(args.checkpoint)
    cal = load_csv(args.data, name="cal")
    alpha = args.alpha
    if alpha is None:
        alpha = header.get("config", {}).get("alpha", 0.1)
    if isinstance(model, CQRModel):
        from .baselines import cqr_calibrate

        if abs(alpha - model.alpha) > 1e-12:
            log.warning("CQR model trained for alpha=%g, calibrating at %g", model.alpha, alpha)
        calib = cqr_calibrate(model, cal.features, cal.targets, alpha)
    else:
        calib = calibrate(model, cal.features, cal.targets, alpha)
    save_calibration(out / "calibration.json", calib)
    write_stamp(out, "calibrate", {"checkpoint": str(args.checkpoint), "data": str(args.data),
                                   "alpha": alpha}, sys.argv[1:])
    return 0


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    model, header = load_checkpoint(args.checkpoint)
    calib = load_calibration(args.calibration)
    test = load_csv(args.data, name="test")
    predictor = _predictor(model, calib)
    t0 = time.perf_counter()
    from .evaluation import coverage, pinaw

    cov, pin = coverage(test, predictor), pinaw(test, predictor)
    cfg = header.get("config", {})
    spread = target_spread(test.targets)
    if args.train_data:
        spread = target_spread(load_csv(args.train_data, name="train").targets)
    threshold = calib.q_hat if hasattr(calib, "q_hat") else float(np.max(calib.corrections))
    rep = MetricsReport(header["method"], str(cfg.get("dataset", "")), float(calib.alpha),
                        int(cfg.get("seed", 0)), cov, pin, pin / spread,
                        int(getattr(model, "K", 0)) if isinstance(model, DensityRegressor) else 0,
                        len(test), float(threshold), time.perf_counter() - t0)
    atomic_write(out / "metrics.json", dumps_json(rep.to_dict()))
    write_stamp(out, "evaluate", {"checkpoint": str(args.checkpoint),
                                  "calibration": str(args.calibration), "data": str(args.data)},
                sys.argv[1:])
    return 0


def cmd_suite(args) -> int:
    out = Path(args.out)
    d = apply_overrides(load_json_config(args.config), args.set)
    if args.seed is not None:
        d["seeds"] = [args.seed]
    if args.workers is not None:
        d["workers"] = args.workers
    suite = SuiteConfig.from_dict(d)
    write_stamp(out, "suite", suite.to_dict(), sys.argv[1:])
    reports, table = run_suite(suite, out)
    failed = failures(reports)
    log.info("suite %s: %d runs, %d failed, %d table rows", suite.name, len(reports),
             len(failed), len(table))
    if failed:
        for r in failed:
            log.error("failed run %s %s alpha=%g seed=%d: %s", r["dataset"], r["method"],
                      r["alpha"], r["seed"], r["error"])
        raise SuiteFailure(f"{len(failed)} of {len(reports)} runs failed")
    return 0


class SuiteFailure(ChdqrError):
    exit_code = 4


def _parse_x(text: str) -> np.ndarray:
    try:
        vals = json.loads(text) if text.strip().startswith("[") else [float(v) for v in text.split(",")]
        return np.asarray(vals, dtype=float).reshape(1, -1)
    except (ValueError, json.JSONDecodeError):
        raise ConfigError(f"cannot parse input {text!r}; give comma-separated numbers") from None


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    calib = load_calibration(args.calibration)
    x = _parse_x(args.x)
    _predictor(model, calib)  # kind check
    if isinstance(model, CQRModel):
        lo, hi, crossings = cqr_predict(model, x, calib)
        rec = {"kind": "cqr", "lower": lo[0].tolist(), "upper": hi[0].tolist(),
               "area": float(np.prod(np.maximum(hi[0] - lo[0], 0.0))), "crossings": crossings}
    else:
        if x.shape[1] != model.net.input_dim:
            raise DataError(f"input has {x.shape[1]} features, model expects {model.net.input_dim}")
        region = predict_region(x[0], model, calib.q_hat)
        cells = voronoi_cells(model.protos, model.box)
        rec = {"kind": "density", "q_hat": calib.q_hat,
               "regions": region.region_indices.tolist(),
               "cells": [{"index": int(i), "prototype": model.protos.coords[i].tolist(),
                          "geometry": np.asarray(cells[i].geometry).tolist(),
                          "area": float(model.areas[i])} for i in region.region_indices],
               "cumulative_probability": region.cumulative_prob, "area": region.total_area}
    text = json.dumps(rec, sort_keys=True) + "\n"
    if args.out:
        atomic_write(Path(args.out) / "prediction.json", text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    p = argparse.ArgumentParser(prog="chdqr", description=__doc__.split("\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"chdqr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("dataset", choices=GEN_DATASETS)
    g.add_argument("--n", type=int, default=None, help="rows before outliers")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--outliers", type=int, default=None, help="rows per outlier component")
    g.add_argument("--variance-reading", choices=("variance", "std"), default="variance")
    g.add_argument("--out", default=".")
    g.set_defaults(func=cmd_gen_data)

    def configurable(sp):
        sp.add_argument("--config", help="JSON file or bundled config name")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (dotted keys allowed); repeatable")
        sp.add_argument("--seed", type=int, default=None)

    t = sub.add_parser("train", parents=[common], help="fit a model")
    configurable(t)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", parents=[common], help="conformal calibration")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True, help="calibration CSV")
    c.add_argument("--alpha", type=float, default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("evaluate", parents=[common], help="coverage and PINAW on a test CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--calibration", required=True)
    e.add_argument("--data", required=True, help="test CSV")
    e.add_argument("--train-data", default=None,
                   help="training CSV whose target spread normalises PINAW (default: test CSV)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("suite", parents=[common], help="run a benchmark suite")
    configurable(s)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_suite)
    s.set_defaults(config="quick_1d")

    pr = sub.add_parser("predict", parents=[common], help="prediction region for one input")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--calibration", required=True)
    pr.add_argument("--x", default="0", help="comma-separated feature values")
    pr.add_argument("--out", default=None)
    pr.set_defaults(func=cmd_predict)
    return p


def _error_record(e: BaseException, code: int) -> str:
    return json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": code})


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        raise
    except Exception as e:  # noqa: BLE001 - top-level guard, reported as one JSON line
        if isinstance(e, ChdqrError):
            code = e.exit_code
        elif isinstance(e, OSError):
            code = DataError.exit_code
        else:
            log.debug("unhandled error", exc_info=True)
            code = 1
        sys.stderr.write(_error_record(e, code) + "\n")
        return code

if __name__ == "__main__":
    sys.exit(main())
