"""Coverage / PINAW metrics and the seeded benchmark runner.

A suite is the grid datasets x methods x alphas x seeds. For every
(dataset, seed) the split is written to disk once and read back by every
method, so all methods see byte-identical data. Density methods train once
per seed and are calibrated at each alpha; CQR trains per alpha because its
quantile levels depend on it.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .baselines import CQRPredictor, cqr_calibrate, cqr_fit, cqr_predict, grid_fit
from .checkpoint import atomic_write
from .config import SuiteConfig, TrainConfig
from .conformal import DensityPredictor, DensityRegressor, calibrate
from .data import Dataset, SplitSpec, load_csv, make_dataset, split, to_csv_text
from .errors import DataError
from .training import fit

log = logging.getLogger(__name__)

TIMING_FIELDS = ("runtime_seconds",)


@dataclass
class MetricsReport:
    """Result of one (dataset, method, alpha, seed) run.

    ``pinaw`` is the mean region volume in raw target units;
    ``pinaw_normalized`` divides it by the product of the per-dimension
    standard deviations of the training targets. ``final_K`` is 0 for CQR.
    """

    method: str
    dataset: str
    alpha: float
    seed: int
    coverage: float
    pinaw: float
    pinaw_normalized: float
    final_K: int
    n_test: int
    threshold: float
    runtime_seconds: float
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- metrics

def _check_nonempty(test):
    if len(test.targets) == 0:
        raise DataError("test split is empty")


def coverage(test: Dataset, predictor) -> float:
    """Fraction of test pairs whose target lies in the predicted region."""
    _check_nonempty(test)
    return float(np.mean(predictor.contains(test.features, test.targets)))


def pinaw(test: Dataset, predictor) -> float:
    """Mean region volume over the test inputs, in target units."""
    _check_nonempty(test)
    return float(np.mean(predictor.region_area(test.features)))


def target_spread(Y) -> float:
    sd = np.asarray(Y, dtype=float).std(axis=0)
    return float(np.prod(np.where(sd > 0, sd, 1.0)))


# ---------------------------------------------------------------- one run

def _fit_method(train: Dataset, cfg: TrainConfig):
    if cfg.method == "grid":
        return DensityRegressor.from_state(grid_fit(train, cfg), "grid")
    if cfg.method == "cqr":
        return cqr_fit(train, cfg)
    return DensityRegressor.from_state(fit(train, cfg), cfg.method)


def _fmt(v: float) -> str:
    return repr(float(v))


def region_rows(model, predictor, test: Dataset) -> tuple[str, str | None]:
    """CSV text describing each test point's region.

    Density models give one row per test point with a ``set_id`` into a
    second table of distinct region sets (ranked region indices joined by
    ``;``). CQR rows carry the corrected interval bounds instead.
    """
    X, Y = test.features, test.targets
    d = Y.shape[1]
    covered = predictor.contains(X, Y)
    area = predictor.region_area(X)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    ycols = [f"y{j}" for j in range(d)]
    if isinstance(predictor, CQRPredictor):
        lo, hi, _ = cqr_predict(model, X, predictor.calib)
        w.writerow(["test_index", *ycols, "covered", "area",
                    *[f"lo{j}" for j in range(d)], *[f"hi{j}" for j in range(d)]])
        for i in range(len(Y)):
            w.writerow([i, *map(_fmt, Y[i]), int(covered[i]), _fmt(area[i]),
                        *map(_fmt, lo[i]), *map(_fmt, hi[i])])
        return buf.getvalue(), None
    order, cum = model.ranked(X)
    sizes = (cum <= predictor.q_hat).sum(axis=1)
    sets: dict[tuple, int] = {}
    w.writerow(["test_index", *ycols, "covered", "area", "set_id"])
    for i in range(len(Y)):
        key = tuple(order[i, :sizes[i]].tolist())
        sid = sets.setdefault(key, len(sets))
        w.writerow([i, *map(_fmt, Y[i]), int(covered[i]), _fmt(area[i]), sid])
    sbuf = io.StringIO()
    sw = csv.writer(sbuf, lineterminator="\n")
    sw.writerow(["set_id", "n_regions", "regions"])
    for key, sid in sets.items():
        sw.writerow([sid, len(key), ";".join(map(str, key))])
    return buf.getvalue(), sbuf.getvalue()


def cells_csv(model: DensityRegressor) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = model.protos.dim
    w.writerow(["index", *[f"c{j}" for j in range(d)], "area"])
    for i, (c, a) in enumerate(zip(model.protos.coords, model.areas)):
        w.writerow([i, *map(_fmt, c), _fmt(a)])
    return buf.getvalue()


def evaluate(model, cal: Dataset, test: Dataset, alpha: float):
    """Calibrate ``model`` at ``alpha`` and score it on ``test``.

    Returns ``(predictor, calibration, coverage, pinaw)``; calibration and
    metrics use the same frozen snapshot.
    """
    if isinstance(model, DensityRegressor):
        calib = calibrate(model, cal.features, cal.targets, alpha)
        predictor = DensityPredictor(model, calib.q_hat)
    else:
        calib = cqr_calibrate(model, cal.features, cal.targets, alpha)
        predictor = CQRPredictor(model, calib)
    return predictor, calib, coverage(test, predictor), pinaw(test, predictor)


def run_name(dataset: str, method: str, alpha: float, seed: int) -> str:
    return f"{dataset}_{method}_a{alpha:g}_s{seed}"


# ---------------------------------------------------------------- suite

def _dataset_label(entry: dict) -> str:
    name = entry.get("label") or entry["dataset"]
    if name.endswith(".csv") or "/" in name:
        name = Path(name).stem
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", name)


def prepare_splits(suite: SuiteConfig, out: Path) -> list[dict]:
    """Write every (dataset, seed) split once; return the job descriptors."""
    jobs = []
    for entry in suite.datasets:
        entry = dict(entry)
        label = _dataset_label(entry)
        entry.pop("label", None)
        base = TrainConfig.from_dict({**suite.base, **entry})
        ds = make_dataset(base)
        for seed in suite.seeds:
            sdir = out / "splits" / f"{label}_s{seed}"
            for part, name in zip(split(ds, SplitSpec(seed=int(seed))), ("train", "cal", "test")):
                atomic_write(sdir / f"{name}.csv", to_csv_text(part))
            for method in suite.methods:
                cfg = {**suite.base, **entry, "method": method, "seed": int(seed)}
                jobs.append({"label": label, "split_dir": str(sdir), "config": cfg,
                             "alphas": list(suite.alphas), "emit_regions": suite.emit_regions,
                             "out": str(out)})
    return jobs


def _load_split(sdir: Path) -> tuple[Dataset, Dataset, Dataset]:
    return tuple(load_csv(sdir / f"{n}.csv", name=n) for n in ("train", "cal", "test"))


def _error_report(job, alpha, err: Exception) -> dict:
    cfg = job["config"]
    r = MetricsReport(cfg["method"], job["label"], float(alpha), int(cfg["seed"]),
                      math.nan, math.nan, math.nan, 0, 0, math.nan, 0.0,
                      error=f"{type(err).__name__}: {err}")
    return r.to_dict()


def run_job(job: dict) -> list[dict]:
    """Train one (dataset, method, seed) and evaluate it at every alpha.

    Failures are caught and returned as report dicts with ``error`` set.
    """
    out = Path(job["out"])
    cfg_d = job["config"]
    label = job["label"]
    try:
        train, cal, test = _load_split(Path(job["split_dir"]))
        spread = target_spread(train.targets)
    except Exception as e:  # noqa: BLE001 - recorded and reported by the suite
        return [_error_report(job, a, e) for a in job["alphas"]]
    reports = []
    shared_model, shared_time = None, 0.0
    for alpha in job["alphas"]:
        try:
            cfg = TrainConfig.from_dict({**cfg_d, "alpha": float(alpha)})
            t0 = time.perf_counter()
            if cfg.method == "cqr":
                model = _fit_method(train, cfg)
                train_time = time.perf_counter() - t0
            else:
                if shared_model is None:
                    shared_model = _fit_method(train, cfg)
                    shared_time = time.perf_counter() - t0
                model, train_time = shared_model, shared_time
            t1 = time.perf_counter()
            predictor, calib, cov, pin = evaluate(model, cal, test, alpha)
            elapsed = train_time + time.perf_counter() - t1
            final_k = model.K if isinstance(model, DensityRegressor) else 0
            threshold = calib.q_hat if hasattr(calib, "q_hat") else float(np.max(calib.corrections))
            rep = MetricsReport(cfg.method, label, float(alpha), cfg.seed, cov, pin, pin / spread,
                                int(final_k), len(test), float(threshold), elapsed)
            if job["emit_regions"]:
                name = run_name(label, cfg.method, alpha, cfg.seed)
                rows, sets = region_rows(model, predictor, test)
                atomic_write(out / "regions" / f"regions_{name}.csv", rows)
                if sets is not None:
                    atomic_write(out / "regions" / f"regionsets_{name}.csv", sets)
                    atomic_write(out / "regions" / f"cells_{name}.csv", cells_csv(model))
            reports.append(rep.to_dict())
            log.info("%s %s alpha=%g seed=%d coverage=%.4f pinaw=%.4g K=%d", label, cfg.method,
                     alpha, cfg.seed, cov, pin, final_k)
        except Exception as e:  # noqa: BLE001 - recorded and reported by the suite
            log.error("%s %s alpha=%g seed=%s failed: %s", label, cfg_d["method"], alpha,
                      cfg_d["seed"], e)
            reports.append(_error_report(job, alpha, e))
    return reports


def _sort_key(r: dict):
    return (r["dataset"], r["method"], r["alpha"], r["seed"])


def aggregate(reports: list[dict]) -> list[dict]:
    """Mean and sample std over seeds per (dataset, method, alpha); failed runs excluded."""
    cells: dict[tuple, list[dict]] = {}
    for r in reports:
        if r.get("error"):
            continue
        cells.setdefault((r["dataset"], r["method"], r["alpha"]), []).append(r)
    rows = []
    for key in sorted(cells):
        rs = cells[key]
        row = {"dataset": key[0], "method": key[1], "alpha": key[2], "n_runs": len(rs)}
        for m in ("coverage", "pinaw", "pinaw_normalized", "final_K"):
            v = np.array([r[m] for r in rs], dtype=float)
            row[f"{m}_mean"] = float(v.mean())
            row[f"{m}_std"] = float(v.std(ddof=1)) if len(v) > 1 else math.nan
        rows.append(row)
    return rows


def results_csv(rows: list[dict]) -> str:
    cols = ["dataset", "method", "alpha", "n_runs"]
    for m in ("coverage", "pinaw", "pinaw_normalized", "final_K"):
        cols += [f"{m}_mean", f"{m}_std"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([r[c] if c in ("dataset", "method", "n_runs") else f"{r[c]:.4g}" for c in cols])
    return buf.getvalue()


def runs_jsonl(reports: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in sorted(reports, key=_sort_key))


def run_suite(suite: SuiteConfig, out, workers: int | None = None):
    """Execute a suite, writing results.csv and runs.jsonl under ``out``.

    Returns ``(reports, table)``; failed runs appear in ``reports`` with an
    ``error`` message and are left out of ``table``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = prepare_splits(suite, out)
    workers = suite.workers if workers is None else workers
    reports: list[dict] = []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rs in pool.map(run_job, jobs):
                reports.extend(rs)
    else:
        for job in jobs:
            reports.extend(run_job(job))
    reports.sort(key=_sort_key)
    table = aggregate(reports)
    atomic_write(out / "runs.jsonl", runs_jsonl(reports))
    atomic_write(out / "results.csv", results_csv(table))
    return reports, table


def failures(reports: list[dict]) -> list[dict]:
    return [r for r in reports if r.get("error")]


def strip_timing(record: dict) -> dict:
    return {k: v for k, v in record.items() if k not in TIMING_FIELDS}


__all__ = ["MetricsReport", "coverage", "pinaw", "evaluate", "run_suite", "run_job", "aggregate",
           "results_csv", "runs_jsonl", "region_rows", "cells_csv", "failures", "strip_timing"]
