"""Prototype sets and the hard/soft quantization of targets onto them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import BoundingBox

_CHUNK = 4096


@dataclass
class PrototypeSet:
    """K prototypes in target space together with the box closing their cells."""

    coords: np.ndarray
    box: BoundingBox
    learnable: bool = True

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        if c.shape[1] != self.box.dim:
            raise ValueError(f"prototype dimension {c.shape[1]} != box dimension {self.box.dim}")
        self.coords = c

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def K(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]


def _coords(protos) -> np.ndarray:
    c = np.asarray(getattr(protos, "coords", protos), dtype=float)
    return c[:, None] if c.ndim == 1 else c


def _points(y, dim: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        y = y.reshape(1, 1)
    elif y.ndim == 1:
        y = y.reshape(-1, dim) if dim == 1 else y.reshape(1, -1)
    if y.shape[1] != dim:
        raise ValueError(f"target dimension {y.shape[1]} != prototype dimension {dim}")
    return y


def distances(y, protos) -> np.ndarray:
    """Euclidean distances, shape (n, K)."""
    c = _coords(protos)
    y = _points(y, c.shape[1])
    out = np.subtract.outer(y[:, 0], c[:, 0])
    out *= out
    for j in range(1, c.shape[1]):
        t = np.subtract.outer(y[:, j], c[:, j])
        t *= t
        out += t
    return np.sqrt(out, out=out)


def hard_assign(y, protos) -> np.ndarray:
    """Index of the nearest prototype for each point; ties go to the lowest index."""
    return distances(y, protos).argmin(axis=1)


def quantization_error(y, protos) -> np.ndarray:
    return distances(y, protos).min(axis=1)


def soft_labels_from_distances(dist: np.ndarray, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = -dist / tau
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def soft_labels(y, protos, tau: float) -> np.ndarray:
    """Temperature softmax of negative distances, shape (n, K); rows sum to one."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return soft_labels_from_distances(distances(y, protos), tau)


def usage(protos, targets, tau: float) -> np.ndarray:
    """Mean soft-assignment mass each prototype receives over ``targets``."""
    c = _coords(protos)
    y = _points(targets, c.shape[1])
    if len(y) == 0:
        raise DataError("usage needs at least one target")
    total = np.zeros(len(c))
    for start in range(0, len(y), _CHUNK):
        total += soft_labels(y[start:start + _CHUNK], c, tau).sum(axis=0)
    return total / len(y)
