"""Bounded Voronoi tessellation of a 1D/2D target space.

Cells are closed by an axis-aligned bounding box so that every prototype
owns a finite volume. The 2D cells are built by clipping the box with
perpendicular-bisector half-planes (Sutherland-Hodgman against one line at
a time); volumes come from the shoelace formula.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from .errors import DataError, DegenerateTessellationError

DUPLICATE_TOL = 1e-12

# neighbours fetched per cell before falling back to a full scan
_NEIGHBOUR_BATCH = 24


@dataclass(frozen=True, eq=False)
class BoundingBox:
    lower: np.ndarray
    upper: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, BoundingBox):
            return NotImplemented
        return np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper)

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes()))

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).reshape(-1)
        upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if lower.shape != upper.shape:
            raise ValueError("lower/upper dimension mismatch")
        if lower.size not in (1, 2):
            raise ValueError(f"only d in {{1, 2}} is supported, got d={lower.size}")
        if not np.all(lower < upper):
            raise ValueError(f"degenerate box: lower={lower}, upper={upper}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def extent(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all((pts >= self.lower) & (pts <= self.upper), axis=1)

    def clamp(self, points) -> np.ndarray:
        return np.clip(points, self.lower, self.upper)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d) -> "BoundingBox":
        return cls(np.asarray(d["lower"]), np.asarray(d["upper"]))


@dataclass
class VoronoiCell:
    """One clipped cell.

    ``geometry`` is ``[a, b]`` for d=1 and an (m, 2) array of vertices in
    counter-clockwise order for d=2.
    """

    prototype_index: int
    geometry: np.ndarray

    @property
    def volume(self) -> float:
        if self.geometry.ndim == 1:
            return float(self.geometry[1] - self.geometry[0])
        return polygon_area(self.geometry)

    def contains(self, point, tol: float = 1e-12) -> bool:
        p = np.asarray(point, dtype=float).reshape(-1)
        if self.geometry.ndim == 1:
            a, b = self.geometry
            return a - tol <= p[0] <= b + tol
        v = self.geometry
        e = np.roll(v, -1, axis=0) - v
        rel = p - v
        cross = e[:, 0] * rel[:, 1] - e[:, 1] * rel[:, 0]
        return bool(np.all(cross >= -tol))


def compute_bounding_box(targets, padding_fraction: float = 0.1) -> BoundingBox:
    """Per-dimension range of ``targets`` widened by ``padding_fraction`` of the range.

    A dimension with zero range is widened by 1.0 on each side instead.
    """
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] == 0:
        raise DataError("cannot compute a bounding box of an empty target set")
    if padding_fraction < 0:
        raise ValueError("padding_fraction must be >= 0")
    lo, hi = y.min(axis=0), y.max(axis=0)
    span = hi - lo
    pad = np.where(span > 0, padding_fraction * span, 1.0)
    return BoundingBox(lo - pad, hi + pad)


def check_distinct(coords: np.ndarray) -> None:
    """Raise if any two prototypes are closer than ``DUPLICATE_TOL``."""
    if len(coords) < 2:
        return
    pairs = cKDTree(coords).query_pairs(DUPLICATE_TOL, output_type="ndarray")
    if len(pairs):
        i, j = sorted(pairs[0])
        raise DegenerateTessellationError(f"prototypes {i} and {j} coincide at {coords[i].tolist()}")


def _as_coords(prototypes, box: BoundingBox) -> np.ndarray:
    coords = getattr(prototypes, "coords", prototypes)
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    if coords.shape[0] < 1:
        raise ValueError("need at least one prototype")
    if coords.shape[1] != box.dim:
        raise ValueError(f"prototype dimension {coords.shape[1]} != box dimension {box.dim}")
    return coords


def _cells_1d(x: np.ndarray, box: BoundingBox) -> list[np.ndarray]:
    order = np.argsort(x, kind="stable")
    xs = x[order]
    edges = np.empty(len(xs) + 1)
    edges[0], edges[-1] = box.lower[0], box.upper[0]
    edges[1:-1] = 0.5 * (xs[:-1] + xs[1:])
    out = [None] * len(xs)
    for rank, idx in enumerate(order):
        a = max(edges[rank], box.lower[0])
        b = min(edges[rank + 1], box.upper[0])
        out[idx] = np.array([a, b])
    return out


def _clip(poly, ax, ay, b):
    """Keep the part of ``poly`` with ax*x + ay*y <= b."""
    out = []
    px, py = poly[-1]
    fp = ax * px + ay * py - b
    for cx, cy in poly:
        fc = ax * cx + ay * cy - b
        if fc <= 0.0:
            if fp > 0.0:
                t = fp / (fp - fc)
                out.append((px + t * (cx - px), py + t * (cy - py)))
            out.append((cx, cy))
        elif fp <= 0.0:
            t = fp / (fp - fc)
            out.append((px + t * (cx - px), py + t * (cy - py)))
        px, py, fp = cx, cy, fc
    return out


def _cell_2d(i, coords, neighbours, dists, rect):
    cx, cy = coords[i]
    poly = rect
    r2 = max((vx - cx) ** 2 + (vy - cy) ** 2 for vx, vy in poly)
    for j, d in zip(neighbours, dists):
        if j == i:
            continue
        # a bisector at distance d/2 cannot cut a cell of circumradius R when d >= 2R
        if d * d >= 4.0 * r2:
            return poly, True
        ox, oy = coords[j]
        ax, ay = ox - cx, oy - cy
        b = 0.5 * (ox * ox + oy * oy - cx * cx - cy * cy)
        poly = _clip(poly, ax, ay, b)
        if not poly:
            return poly, True
        r2 = max((vx - cx) ** 2 + (vy - cy) ** 2 for vx, vy in poly)
    return poly, False


def _delaunay_neighbours(coords: np.ndarray):
    """Delaunay adjacency, or None when Qhull rejects the input (e.g. collinear)."""
    if len(coords) < 3:
        return None
    try:
        tri = Delaunay(coords)
    except QhullError:
        return None
    if len(tri.coplanar):
        return None
    return tri.vertex_neighbor_vertices


def _cells_2d(coords: np.ndarray, box: BoundingBox) -> list[np.ndarray]:
    (x0, y0), (x1, y1) = box.lower, box.upper
    rect = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    K = len(coords)
    if K == 1:
        return [np.array(rect)]
    pts = [tuple(c) for c in coords.tolist()]
    adjacency = _delaunay_neighbours(coords)
    cells = []
    if adjacency is not None:
        # every Voronoi edge of positive length joins Delaunay neighbours
        indptr, indices = adjacency
        for i in range(K):
            nb = indices[indptr[i]:indptr[i + 1]]
            d = np.hypot(*(coords[nb] - coords[i]).T)
            order = np.lexsort((nb, d))
            poly, _ = _cell_2d(i, pts, nb[order].tolist(), d[order].tolist(), rect)
            cells.append(np.array(poly, dtype=float).reshape(-1, 2))
        return cells
    tree = cKDTree(coords)
    k = min(K, _NEIGHBOUR_BATCH)
    dist, idx = tree.query(coords, k=k)
    for i in range(K):
        poly, done = _cell_2d(i, pts, idx[i].tolist(), dist[i].tolist(), rect)
        if not done and k < K:
            d_all = np.hypot(*(coords - coords[i]).T)
            order = np.argsort(d_all, kind="stable")
            poly, _ = _cell_2d(i, pts, order.tolist(), d_all[order].tolist(), rect)
        cells.append(np.array(poly, dtype=float).reshape(-1, 2))
    return cells


def voronoi_cells(prototypes, box: BoundingBox) -> list[VoronoiCell]:
    """Clip every prototype's Voronoi cell to ``box``.

    For d=2 only the bisectors of Delaunay neighbours are clipped, nearest
    first. Degenerate inputs (collinear prototypes) fall back to scanning all
    prototypes nearest-first until the rest are too far away to cut the cell.
    """
    coords = _as_coords(prototypes, box)
    check_distinct(coords)
    if box.dim == 1:
        geoms = _cells_1d(coords[:, 0], box)
    else:
        geoms = _cells_2d(coords, box)
    return [VoronoiCell(i, g) for i, g in enumerate(geoms)]


def polygon_area(vertices) -> float:
    v = np.asarray(vertices, dtype=float)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def voronoi_areas(prototypes, box: BoundingBox) -> np.ndarray:
    """Volume of each prototype's clipped Voronoi cell.

    Raises
    ------
    DegenerateTessellationError
        If two prototypes coincide or a cell has no volume.
    """
    cells = voronoi_cells(prototypes, box)
    areas = np.array([c.volume for c in cells])
    bad = np.flatnonzero(~(areas > 0))
    if bad.size:
        raise DegenerateTessellationError(f"cell {bad[0]} has zero volume")
    return areas


def monte_carlo_areas(prototypes, box: BoundingBox, n_samples: int, seed: int,
                      chunk: int = 1 << 15) -> np.ndarray:
    """Estimate cell volumes by nearest-prototype assignment of uniform samples.

    Ties go to the lowest prototype index. Deterministic given ``seed``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    coords = _as_coords(prototypes, box)
    rng = np.random.default_rng(seed)
    counts = np.zeros(len(coords), dtype=np.int64)
    left = n_samples
    while left > 0:
        m = min(chunk, left)
        s = box.lower + rng.random((m, box.dim)) * box.extent
        d2 = ((s[:, None, :] - coords[None, :, :]) ** 2).sum(axis=-1)
        counts += np.bincount(d2.argmin(axis=1), minlength=len(coords))
        left -= m
    return counts / n_samples * box.volume
