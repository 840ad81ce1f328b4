"""Synthetic generators, outlier injection, CSV ingestion and seeded splits.

All random draws use numpy's counter-based Philox bit generator so that a
dataset is a pure function of ``(n, seed)``.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

UNCOND1D_MEANS = np.array([0.75, -0.75])
UNCOND1D_SPREAD = 0.05

UNCOND2D_MEANS = np.array([[0.0, 0.0], [3.0, 3.0], [-3.0, -4.0]])
UNCOND2D_COVS = np.array([
    [[1.0, 0.0], [0.0, 1.0]],
    [[0.5, 0.2], [0.2, 0.5]],
    [[0.7, -0.2], [-0.2, 0.5]],
])
# np.linalg.cholesky raises LinAlgError here if a covariance is not positive definite
UNCOND2D_CHOL = np.linalg.cholesky(UNCOND2D_COVS)

OUTLIER_MEANS = np.array([[8.0, -8.0], [-8.0, 8.0]])

DEFAULT_SIZES = {"uncond1d": 10_000, "uncond2d": 30_000, "uncond2d_outlier": 30_000}
DEFAULT_OUTLIERS = 1000
MIN_ROWS = 10


def philox(seed, *stream) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *stream])))


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    name: str = "dataset"
    provenance: dict = field(default_factory=dict)
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if self.features.shape[0] != self.targets.shape[0]:
            raise DataError(f"{self.features.shape[0]} feature rows vs {self.targets.shape[0]} target rows")
        if self.targets.shape[1] not in (1, 2):
            raise DataError(f"target dimension must be 1 or 2, got {self.targets.shape[1]}")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.targets))):
            raise DataError(f"dataset {self.name!r} contains NaN or Inf")

    def __len__(self) -> int:
        return self.targets.shape[0]

    @property
    def dim(self) -> int:
        return self.targets.shape[1]

    def subset(self, idx, suffix: str = "") -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.features[idx], self.targets[idx], self.name + suffix,
                       dict(self.provenance),
                       None if self.labels is None else self.labels[idx])

    def validate(self) -> "Dataset":
        if len(self) < MIN_ROWS:
            raise DataError(f"dataset {self.name!r} has {len(self)} rows; need at least {MIN_ROWS}")
        return self


def _check_n(n):
    if int(n) < MIN_ROWS:
        raise DataError(f"n must be >= {MIN_ROWS}, got {n}")


def gen_uncond1d(n: int = DEFAULT_SIZES["uncond1d"], seed: int = 0,
                 variance_reading: str = "variance") -> Dataset:
    """Equal mixture 1/2 N(0.75, s) + 1/2 N(-0.75, s) with constant-zero input.

    ``variance_reading`` decides whether the printed 0.05 is a variance
    ("variance", the default) or a standard deviation ("std").
    """
    _check_n(n)
    if variance_reading == "variance":
        sd = math.sqrt(UNCOND1D_SPREAD)
    elif variance_reading == "std":
        sd = UNCOND1D_SPREAD
    else:
        raise ValueError(f"unknown variance_reading {variance_reading!r}")
    rng = philox(seed, 1)
    comp = rng.integers(0, 2, size=n)
    y = UNCOND1D_MEANS[comp] + sd * rng.standard_normal(n)
    prov = {"generator": "uncond1d", "n": int(n), "seed": int(seed), "variance_reading": variance_reading}
    return Dataset(np.zeros((n, 1)), y[:, None], "uncond1d", prov, comp)


def gen_uncond2d(n: int = DEFAULT_SIZES["uncond2d"], seed: int = 0) -> Dataset:
    """Equal-weight three-component 2D Gaussian mixture with constant-zero input."""
    _check_n(n)
    rng = philox(seed, 2)
    comp = rng.integers(0, 3, size=n)
    z = rng.standard_normal((n, 2))
    y = UNCOND2D_MEANS[comp] + np.einsum("nij,nj->ni", UNCOND2D_CHOL[comp], z)
    prov = {"generator": "uncond2d", "n": int(n), "seed": int(seed)}
    return Dataset(np.zeros((n, 1)), y, "uncond2d", prov, comp)


def add_outliers(base: Dataset, n_per_component: int, seed: int) -> Dataset:
    """Append draws from two far-away unit-covariance Gaussians, then shuffle.

    Outlier rows get component labels 3 and 4 (when ``base`` carries labels).
    """
    if base.dim != 2:
        raise DataError("outliers are defined for 2D targets only")
    if n_per_component < 0:
        raise ValueError("n_per_component must be >= 0")
    prov = dict(base.provenance)
    prov["outliers"] = {"n_per_component": int(n_per_component), "seed": int(seed),
                        "means": OUTLIER_MEANS.tolist(), "cov": "identity"}
    if n_per_component == 0:
        return Dataset(base.features.copy(), base.targets.copy(), base.name, prov,
                       None if base.labels is None else base.labels.copy())
    rng = philox(seed, 3)
    comp = np.repeat(np.arange(len(OUTLIER_MEANS)), n_per_component)
    extra = OUTLIER_MEANS[comp] + rng.standard_normal((len(comp), 2))
    feats = np.zeros((len(comp), base.features.shape[1]))
    y = np.concatenate([base.targets, extra])
    x = np.concatenate([base.features, feats])
    labels = None
    if base.labels is not None:
        labels = np.concatenate([base.labels, comp + 3])
    perm = rng.permutation(len(y))
    return Dataset(x[perm], y[perm], base.name + "_outlier", prov,
                   None if labels is None else labels[perm])


def load_csv(path, target_columns=None, feature_columns=None, name=None) -> Dataset:
    """Read a headed CSV.

    Targets default to the columns named ``y<k>``; features default to every
    other column. With no feature columns the input is a constant zero.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    lines = raw.decode("utf-8").splitlines()
    reader = csv.reader(lines)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError(f"{path}: empty file, header row required") from None
    if target_columns is None:
        target_columns = [h for h in header if h[:1] == "y" and h[1:].isdigit()]
        if not target_columns:
            raise DataError(f"{path}: no target columns given and none named y<k>")
    missing = [c for c in list(target_columns) + list(feature_columns or []) if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    if feature_columns is None:
        feature_columns = [h for h in header if h not in target_columns]
    t_idx = [header.index(c) for c in target_columns]
    f_idx = [header.index(c) for c in feature_columns]

    rows, bad = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            bad.append(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            continue
        try:
            vals = [float(row[i]) for i in t_idx + f_idx]
        except ValueError:
            bad.append(f"line {lineno}: non-numeric value")
            continue
        if not all(math.isfinite(v) for v in vals):
            bad.append(f"line {lineno}: NaN or Inf")
            continue
        rows.append(vals)
    if bad:
        shown = "; ".join(bad[:10])
        more = f" (+{len(bad) - 10} more)" if len(bad) > 10 else ""
        raise DataError(f"{path}: malformed rows: {shown}{more}")
    arr = np.array(rows, dtype=float).reshape(-1, len(t_idx) + len(f_idx))
    y = arr[:, :len(t_idx)]
    x = arr[:, len(t_idx):] if f_idx else np.zeros((len(arr), 1))
    prov = {"source": str(path), "sha256": hashlib.sha256(raw).hexdigest(),
            "target_columns": list(target_columns), "feature_columns": list(feature_columns)}
    return Dataset(x, y, name or path.stem, prov).validate()


def to_csv_text(ds: Dataset) -> str:
    """Serialise with columns x0.. then y0..; floats written round-trip exact."""
    p, d = ds.features.shape[1], ds.dim
    header = [f"x{i}" for i in range(p)] + [f"y{j}" for j in range(d)]
    out = [",".join(header)]
    for row in np.hstack([ds.features, ds.targets]):
        out.append(",".join(repr(float(v)) for v in row))
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ValueError("fractions must be three non-negative numbers")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {sum(self.fractions)}")


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded permutation cut into floor(f_train*n), floor(f_cal*n) and the remainder."""
    n_tr = math.floor(round(spec.fractions[0] * n, 9))
    n_cal = math.floor(round(spec.fractions[1] * n, 9))
    perm = philox(spec.seed, 4).permutation(n)
    return perm[:n_tr], perm[n_tr:n_tr + n_cal], perm[n_tr + n_cal:]


def split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    tr, cal, te = split_indices(len(ds), spec)
    return ds.subset(tr, ":train"), ds.subset(cal, ":cal"), ds.subset(te, ":test")


def make_dataset(cfg) -> Dataset:
    """Build the dataset named by a TrainConfig (generator name or CSV path)."""
    name = cfg.dataset
    if name == "uncond1d":
        ds = gen_uncond1d(cfg.n or DEFAULT_SIZES[name], cfg.data_seed, cfg.variance_reading)
    elif name in ("uncond2d", "uncond2d_outlier"):
        ds = gen_uncond2d(cfg.n or DEFAULT_SIZES[name], cfg.data_seed)
        n_out = cfg.outliers_per_component
        if name == "uncond2d_outlier" and n_out == 0:
            n_out = DEFAULT_OUTLIERS
        if n_out:
            ds = add_outliers(ds, n_out, cfg.data_seed)
    else:
        ds = load_csv(name, cfg.target_columns, cfg.feature_columns)
    return ds.validate()
