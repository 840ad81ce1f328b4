"""Comparison methods: a static GRID of prototypes and per-dimension CQR."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .conformal import conformal_index
from .data import Dataset
from .errors import DataError, NumericalError
from .geometry import BoundingBox, compute_bounding_box
from .network import Adam, DensityNetwork
from .quantizer import PrototypeSet
from .training import TrainState, fit

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- GRID

@dataclass(frozen=True)
class GridSpec:
    bins_per_dim: int
    box: BoundingBox

    def __post_init__(self):
        if self.bins_per_dim < 2:
            raise ValueError("bins_per_dim must be >= 2")


def build_grid(spec: GridSpec) -> tuple[PrototypeSet, np.ndarray]:
    """Cell centres of a uniform lattice over the box, and their (equal) volumes.

    For d=2 the first coordinate varies slowest.
    """
    box, b = spec.box, spec.bins_per_dim
    axes = [lo + (np.arange(b) + 0.5) * (hi - lo) / b for lo, hi in zip(box.lower, box.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([m.ravel() for m in mesh], axis=1)
    areas = np.full(len(coords), box.volume / b ** box.dim)
    return PrototypeSet(coords, box, learnable=False), areas


def grid_fit(train: Dataset, cfg: TrainConfig, callback=None) -> TrainState:
    """Train the density network over static lattice prototypes."""
    box = compute_bounding_box(train.targets, cfg.padding_fraction)
    protos, areas = build_grid(GridSpec(cfg.bins_per_dim, box))
    return fit(train, cfg, protos=protos, areas=areas, callback=callback)


# ---------------------------------------------------------------- CQR

def pinball_loss(pred, y, level: float):
    """level*(y - pred) when y >= pred, else (level - 1)*(y - pred); elementwise."""
    if not 0 < level < 1:
        raise ValueError(f"quantile level must lie in (0, 1), got {level}")
    r = np.asarray(y, dtype=float) - np.asarray(pred, dtype=float)
    return np.where(r >= 0, level * r, (level - 1.0) * r)


@dataclass
class CQRModel:
    """Lower/upper quantile network; outputs are ordered (lo_0, hi_0, lo_1, hi_1, ...).

    Targets are standardised for training; ``predict_raw`` returns target units.
    """

    net: DensityNetwork
    alpha: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    @property
    def dim(self) -> int:
        return self.net.n_outputs // 2

    @property
    def levels(self) -> tuple[float, float]:
        return self.alpha / 2.0, 1.0 - self.alpha / 2.0

    def predict_raw(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None] if self.net.input_dim == 1 else X[None, :]
        out = self.net.forward((X - self.feature_mean) / self.feature_std)
        lo = out[:, 0::2] * self.target_std + self.target_mean
        hi = out[:, 1::2] * self.target_std + self.target_mean
        return lo, hi


def cqr_fit(train: Dataset, cfg: TrainConfig, alpha: float | None = None, callback=None) -> CQRModel:
    """Minimise the summed pinball losses at alpha/2 and 1 - alpha/2 per target dimension."""
    if len(train) == 0:
        raise DataError("training split is empty")
    alpha = cfg.alpha if alpha is None else alpha
    streams = np.random.SeedSequence(cfg.seed).spawn(4)
    rng_net = np.random.Generator(np.random.Philox(streams[0]))
    rng_shuffle = np.random.Generator(np.random.Philox(streams[2]))
    X, Y = train.features, train.targets
    fm, fs = X.mean(axis=0), X.std(axis=0)
    fs = np.where(fs > 0, fs, 1.0)
    tm, ts = Y.mean(axis=0), Y.std(axis=0)
    ts = np.where(ts > 0, ts, 1.0)
    d = Y.shape[1]
    net = DensityNetwork(X.shape[1], cfg.hidden_sizes, 2 * d, rng_net)
    model = CQRModel(net, float(alpha), fm, fs, tm, ts)
    Xs, Ys = (X - fm) / fs, (Y - tm) / ts
    levels = np.tile(np.array(model.levels), d)
    targets = np.repeat(Ys, 2, axis=1)
    opt = Adam(cfg.lr_theta)
    N = len(Y)
    for epoch in range(cfg.epochs):
        perm = rng_shuffle.permutation(N)
        total = 0.0
        n_batches = 0
        for start in range(0, N, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            out, acts = net.forward(Xs[idx], return_cache=True)
            r = targets[idx] - out
            loss = float(np.where(r >= 0, levels * r, (levels - 1.0) * r).sum(axis=1).mean())
            if not np.isfinite(loss):
                raise NumericalError(f"epoch {epoch} batch {n_batches}: non-finite pinball loss")
            d_out = np.where(r >= 0, -levels, 1.0 - levels) / len(idx)
            opt.step(net.params(), net.backward(acts, d_out))
            total += loss
            n_batches += 1
        stats = {"epoch": epoch, "loss": total / n_batches}
        log.info("cqr epoch %d pinball %.5f", epoch, stats["loss"])
        if callback is not None:
            callback(model, stats)
    return model


@dataclass
class CQRCalibration:
    corrections: np.ndarray
    scores: np.ndarray
    alpha: float
    n_cal: int

    def to_dict(self) -> dict:
        return {"kind": "cqr", "alpha": self.alpha, "n_cal": self.n_cal,
                "corrections": self.corrections.tolist(),
                "scores": [s.tolist() for s in self.scores]}

    @classmethod
    def from_dict(cls, d) -> "CQRCalibration":
        return cls(np.asarray(d["corrections"], dtype=float),
                   np.asarray(d["scores"], dtype=float), float(d["alpha"]), int(d["n_cal"]))


def cqr_scores(model: CQRModel, X, Y) -> np.ndarray:
    """Per-dimension conformity scores max(lo - y, y - hi), shape (n, d)."""
    lo, hi = model.predict_raw(X)
    Y = np.asarray(Y, dtype=float).reshape(lo.shape)
    return np.maximum(lo - Y, Y - hi)


def cqr_calibrate(model: CQRModel, X_cal, Y_cal, alpha: float | None = None) -> CQRCalibration:
    """Independent split-conformal correction per target dimension at level 1 - alpha.

    A rank beyond n_cal gives an infinite correction (the trivial interval).
    """
    alpha = model.alpha if alpha is None else alpha
    E = cqr_scores(model, X_cal, Y_cal)
    n = len(E)
    k = conformal_index(n, alpha)
    E_sorted = np.sort(E, axis=0)
    corr = E_sorted[k - 1] if k <= n else np.full(E.shape[1], np.inf)
    return CQRCalibration(np.asarray(corr, dtype=float), E_sorted.T.copy(), float(alpha), n)


def cqr_predict(model: CQRModel, X, calib: CQRCalibration):
    """Corrected per-dimension intervals and the number of crossed (empty) ones.

    Returns ``(lo, hi, crossings)``; crossed intervals keep ``hi < lo`` and
    count as zero width.
    """
    lo, hi = model.predict_raw(X)
    lo = lo - calib.corrections
    hi = hi + calib.corrections
    crossings = int((hi < lo).sum())
    if crossings:
        log.info("cqr: %d crossed interval(s) clamped to zero width", crossings)
    return lo, hi, crossings


class CQRPredictor:
    """Cross-product of corrected per-dimension intervals."""

    def __init__(self, model: CQRModel, calib: CQRCalibration):
        self.model = model
        self.calib = calib
        self.crossings = 0

    def contains(self, X, Y) -> np.ndarray:
        lo, hi, _ = cqr_predict(self.model, X, self.calib)
        Y = np.asarray(Y, dtype=float).reshape(lo.shape)
        return np.all((Y >= lo) & (Y <= hi), axis=1)

    def region_area(self, X) -> np.ndarray:
        lo, hi, self.crossings = cqr_predict(self.model, X, self.calib)
        return np.prod(np.maximum(hi - lo, 0.0), axis=1)
