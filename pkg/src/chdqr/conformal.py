"""Split-conformal calibration over density-ranked Voronoi regions.

Regions are ranked by predicted density (the raw network output), densest
first. The score of a labelled point is the cumulative probability of the
ranked regions up to and including the one holding its target; the
prediction set is the longest ranked prefix whose cumulative probability
stays at or below the calibrated threshold. Score and set share the same
cumulative sums, so ``y in region(x)`` exactly when ``score(x, y) <= q_hat``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import BoundingBox
from .network import DensityNetwork, log_softmax
from .quantizer import PrototypeSet, hard_assign

log = logging.getLogger(__name__)

_CHUNK = 2048


def conformal_index(n: int, alpha: float) -> int:
    """1-based rank ceil((n + 1)(1 - alpha)) of the conformal order statistic."""
    if n < 1:
        raise DataError("calibration needs at least one score")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    # rounding guards against e.g. 10 * 0.9 = 9.000000000000002
    return math.ceil(round((n + 1) * (1.0 - alpha), 9))


def conformal_quantile(scores, alpha: float, saturate: float = 1.0) -> float:
    """The conformal order statistic of ``scores``, or ``saturate`` when the rank exceeds n."""
    s = np.sort(np.asarray(scores, dtype=float))
    k = conformal_index(len(s), alpha)
    return float(s[k - 1]) if k <= len(s) else float(saturate)


@dataclass
class CalibrationResult:
    scores: np.ndarray
    q_hat: float
    alpha: float
    n_cal: int

    def to_dict(self) -> dict:
        return {"kind": "density", "alpha": self.alpha, "n_cal": self.n_cal,
                "q_hat": self.q_hat, "scores": self.scores.tolist()}

    @classmethod
    def from_dict(cls, d) -> "CalibrationResult":
        return cls(np.asarray(d["scores"], dtype=float), float(d["q_hat"]),
                   float(d["alpha"]), int(d["n_cal"]))


@dataclass
class PredictionRegion:
    region_indices: np.ndarray
    cumulative_prob: float
    total_area: float


def density_order(log_density) -> np.ndarray:
    """Per row, region indices by descending density; ties keep ascending index."""
    ld = np.atleast_2d(np.asarray(log_density, dtype=float))
    return np.argsort(-ld, axis=1, kind="stable")


def ranked_cumulative(log_density, areas):
    """Density order and the cumulative probabilities along it, both (n, K)."""
    ld = np.atleast_2d(np.asarray(log_density, dtype=float))
    order = density_order(ld)
    probs = np.exp(log_softmax(ld + np.log(areas)))
    cum = np.cumsum(np.take_along_axis(probs, order, axis=1), axis=1)
    # the full set must sit at exactly 1 so that q_hat = 1 keeps every region
    np.minimum(cum, 1.0, out=cum)
    cum[:, -1] = 1.0
    return order, cum


def scores_from_log_density(log_density, areas, cells, inside=None) -> np.ndarray:
    """Cumulative ranked probability up to each target's region (1.0 outside the box)."""
    order, cum = ranked_cumulative(log_density, areas)
    rank = np.argsort(order, axis=1)
    cells = np.asarray(cells, dtype=int)
    s = cum[np.arange(len(cells)), rank[np.arange(len(cells)), cells]]
    if inside is not None:
        s = np.where(inside, s, 1.0)
    return s


def region_sizes(cum, q_hat: float) -> np.ndarray:
    """Number of ranked regions kept: the longest prefix with cumulative prob <= q_hat."""
    return (cum <= q_hat).sum(axis=1)


@dataclass
class DensityRegressor:
    """Frozen snapshot of a trained density model (CHDQR, CHDQR-Dynamic or GRID)."""

    net: DensityNetwork
    protos: PrototypeSet
    areas: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    method: str = "chdqr"

    @classmethod
    def from_state(cls, state, method: str = "chdqr") -> "DensityRegressor":
        return cls(state.net.copy(), PrototypeSet(state.protos.coords.copy(), state.protos.box,
                                                  state.protos.learnable),
                   state.areas.copy(), state.feature_mean.copy(), state.feature_std.copy(), method)

    @property
    def box(self) -> BoundingBox:
        return self.protos.box

    @property
    def K(self) -> int:
        return self.protos.K

    def log_density(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None] if self.net.input_dim == 1 else X[None, :]
        Xs = (X - self.feature_mean) / self.feature_std
        out = np.empty((len(Xs), self.K))
        for s in range(0, len(Xs), _CHUNK):
            out[s:s + _CHUNK] = self.net.forward(Xs[s:s + _CHUNK])
        return out

    def ranked(self, X):
        return ranked_cumulative(self.log_density(X), self.areas)

    def cells(self, Y) -> np.ndarray:
        return hard_assign(np.asarray(Y, dtype=float).reshape(-1, self.protos.dim), self.protos)

    def scores(self, X, Y) -> np.ndarray:
        Y = np.asarray(Y, dtype=float).reshape(-1, self.protos.dim)
        inside = self.box.contains(Y)
        if not np.all(inside):
            log.warning("%d target(s) outside the bounding box scored as 1.0", int((~inside).sum()))
        return scores_from_log_density(self.log_density(X), self.areas, self.cells(Y), inside)


def nonconformity_score(x, y, model: DensityRegressor) -> float:
    return float(model.scores(np.atleast_2d(x), np.atleast_2d(y))[0])


def calibrate(model: DensityRegressor, X_cal, Y_cal, alpha: float) -> CalibrationResult:
    """Scores on the calibration split and their conformal threshold."""
    if len(Y_cal) == 0:
        raise DataError("calibration split is empty")
    scores = np.sort(model.scores(X_cal, Y_cal))
    return CalibrationResult(scores, conformal_quantile(scores, alpha), float(alpha), len(scores))


def predict_regions(model: DensityRegressor, X, q_hat: float) -> list[PredictionRegion]:
    if not 0 <= q_hat <= 1:
        raise ValueError(f"q_hat must lie in [0, 1], got {q_hat}")
    order, cum = model.ranked(X)
    r = region_sizes(cum, q_hat)
    out = []
    for row, k in enumerate(r):
        idx = order[row, :k]
        out.append(PredictionRegion(idx, float(cum[row, k - 1]) if k else 0.0,
                                    float(model.areas[idx].sum())))
    return out


def predict_region(x, model: DensityRegressor, q_hat: float) -> PredictionRegion:
    return predict_regions(model, np.atleast_2d(x), q_hat)[0]


class DensityPredictor:
    """Calibrated density model as a set-valued predictor (for metrics)."""

    def __init__(self, model: DensityRegressor, q_hat: float):
        self.model = model
        self.q_hat = float(q_hat)

    def contains(self, X, Y) -> np.ndarray:
        return self.model.scores(X, Y) <= self.q_hat

    def region_area(self, X) -> np.ndarray:
        order, cum = self.model.ranked(X)
        r = region_sizes(cum, self.q_hat)
        # areas summed in density order so that cumulative area lines up with r
        cum_area = np.cumsum(self.model.areas[order], axis=1)
        out = np.zeros(len(r))
        nz = r > 0
        out[nz] = cum_area[np.flatnonzero(nz), r[nz] - 1]
        return out
