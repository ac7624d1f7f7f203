"""Injector geometry, region partition, piecewise-affine rescaling and IDW.

Every run lives on its own 2-D axisymmetric grid. Runs are brought onto a
common reference grid by splitting each domain into four regions

    (a) head-end to inlet        0 <= x <= dL
    (b) inlet to nozzle exit     dL < x <= L
    (c) downstream, top          x > L, y > R_n
    (d) downstream, bottom       x > L, y <= R_n

and stretching each region affinely onto the matching region of the
reference geometry. Fields are then transferred between point sets with
inverse distance weighting over the k nearest neighbours.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateMapError, DomainError

PARAM_NAMES = ("L", "R_n", "delta", "theta", "dL")

# Design ranges of the five injector parameters (mm, mm, mm, deg, mm).
TABLE_RANGES = {
    "L": (20.0, 100.0),
    "R_n": (2.0, 5.0),
    "delta": (0.5, 2.0),
    "theta": (45.0, 75.0),
    "dL": (1.0, 4.0),
}

EXACT_HIT = 1e-12
IDW_POWER = 2


class Region(enum.IntEnum):
    HEAD_END_TO_INLET = 0
    INLET_TO_EXIT = 1
    DOWNSTREAM_TOP = 2
    DOWNSTREAM_BOTTOM = 3


@dataclass(frozen=True)
class GeometryParams:
    """Design variables of one injector run.

    ``x_max`` and ``y_max`` are the downstream extents of the computational
    domain. They are run metadata rather than design variables and may be
    left as ``None`` until a grid is available (see :meth:`with_extent`).
    """

    L: float
    R_n: float
    delta: float
    theta: float
    dL: float
    x_max: float | None = None
    y_max: float | None = None
    validate_ranges: bool = field(default=False, compare=False, repr=False)

    def __post_init__(self):
        vals = self.as_vector()
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise DomainError(f"geometry parameters must be finite and positive: {self}")
        if self.dL >= self.L:
            raise DomainError(f"inlet distance dL={self.dL} must be smaller than L={self.L}")
        if self.validate_ranges:
            for name in PARAM_NAMES:
                lo, hi = TABLE_RANGES[name]
                v = getattr(self, name)
                if not lo <= v <= hi:
                    raise DomainError(f"{name}={v} outside design range [{lo}, {hi}]")

    def as_vector(self, names=PARAM_NAMES) -> np.ndarray:
        return np.array([getattr(self, n) for n in names], dtype=float)

    def with_extent(self, points) -> GeometryParams:
        """Fill missing downstream extents from the bounding box of ``points``."""
        pts = as_points(points)
        x_max = self.x_max if self.x_max is not None else float(pts[:, 0].max())
        y_max = self.y_max if self.y_max is not None else float(pts[:, 1].max())
        return replace(self, x_max=x_max, y_max=y_max)

    def to_dict(self) -> dict:
        d = {n: float(getattr(self, n)) for n in PARAM_NAMES}
        d["X_max"] = None if self.x_max is None else float(self.x_max)
        d["Y_max"] = None if self.y_max is None else float(self.y_max)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GeometryParams:
        missing = [n for n in PARAM_NAMES if n not in d]
        if missing:
            raise DomainError(f"geometry is missing fields {missing}")
        return cls(
            **{n: float(d[n]) for n in PARAM_NAMES},
            x_max=None if d.get("X_max") is None else float(d["X_max"]),
            y_max=None if d.get("Y_max") is None else float(d["Y_max"]),
        )


@dataclass(frozen=True)
class Grid:
    """A set of distinct 2-D points (mm)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise DomainError(f"grid must be a non-empty (J, 2) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DomainError("grid coordinates must be finite")
        if pts.shape[0] > 1 and cKDTree(pts).query_pairs(EXACT_HIT):
            raise DomainError("grid contains coincident points")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def J(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.J


def as_points(grid) -> np.ndarray:
    if isinstance(grid, Grid):
        return grid.points
    pts = np.asarray(grid, dtype=float)
    if pts.ndim == 1 and pts.shape[0] == 2:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DomainError(f"expected (J, 2) points, got shape {pts.shape}")
    return pts


def partition_grid(grid, geom: GeometryParams) -> np.ndarray:
    """Label each point with its :class:`Region` code.

    Points on a region boundary go to the lower-indexed region, so
    ``x == dL`` is head-end side and ``x == L`` is inside the injector.
    """
    pts = as_points(grid)
    x, y = pts[:, 0], pts[:, 1]
    if np.any(x < 0) or np.any(y < 0):
        bad = int(np.flatnonzero((x < 0) | (y < 0))[0])
        raise DomainError(f"point {bad} at {tuple(pts[bad])} has a negative coordinate")
    labels = np.full(pts.shape[0], Region.DOWNSTREAM_BOTTOM, dtype=np.int8)
    labels[(x > geom.L) & (y > geom.R_n)] = Region.DOWNSTREAM_TOP
    labels[x <= geom.L] = Region.INLET_TO_EXIT
    labels[x <= geom.dL] = Region.HEAD_END_TO_INLET
    return labels


@dataclass(frozen=True)
class PiecewiseAffineMap:
    """Region-wise map ``p -> anchor_ref + scale * (p - anchor_src)``.

    Regions are decided from the source geometry. All four transforms are
    diagonal, so the map is continuous wherever two regions share a face.
    """

    src: GeometryParams
    ref: GeometryParams
    scale: np.ndarray  # (4, 2)
    anchor_src: np.ndarray  # (4, 2)
    anchor_ref: np.ndarray  # (4, 2)

    @property
    def offset(self) -> np.ndarray:
        return self.anchor_ref - self.scale * self.anchor_src

    def apply(self, grid) -> np.ndarray:
        pts = as_points(grid)
        lab = partition_grid(pts, self.src)
        return self.anchor_ref[lab] + self.scale[lab] * (pts - self.anchor_src[lab])

    __call__ = apply

    def inverse(self) -> PiecewiseAffineMap:
        return build_rescale_map(self.ref, self.src)


def _extents(g: GeometryParams, role: str):
    if g.x_max is None or g.y_max is None:
        raise DegenerateMapError(f"{role} geometry has no downstream extent; call with_extent first")
    lengths = {
        "dL": g.dL,
        "L - dL": g.L - g.dL,
        "X_max - L": g.x_max - g.L,
        "R_n": g.R_n,
        "Y_max - R_n": g.y_max - g.R_n,
    }
    for name, v in lengths.items():
        if not v > 0:
            raise DegenerateMapError(f"{role} geometry has zero-length region ({name} = {v})")
    return lengths


def build_rescale_map(src: GeometryParams, ref: GeometryParams) -> PiecewiseAffineMap:
    """Map points of geometry ``src`` onto the matching points of ``ref``.

    Only ``L``, ``R_n`` and ``dL`` (plus the downstream extents) enter the
    map; ``delta`` and ``theta`` do not change the domain shape.
    """
    ls, lr = _extents(src, "source"), _extents(ref, "reference")
    sx = [lr["dL"] / ls["dL"], lr["L - dL"] / ls["L - dL"], lr["X_max - L"] / ls["X_max - L"]]
    sy_in = lr["R_n"] / ls["R_n"]
    sy_top = lr["Y_max - R_n"] / ls["Y_max - R_n"]

    scale = np.empty((4, 2))
    anchor_src = np.zeros((4, 2))
    anchor_ref = np.zeros((4, 2))
    scale[Region.HEAD_END_TO_INLET] = (sx[0], sy_in)
    scale[Region.INLET_TO_EXIT] = (sx[1], sy_in)
    anchor_src[Region.INLET_TO_EXIT, 0] = src.dL
    anchor_ref[Region.INLET_TO_EXIT, 0] = ref.dL
    scale[Region.DOWNSTREAM_TOP] = (sx[2], sy_top)
    anchor_src[Region.DOWNSTREAM_TOP] = (src.L, src.R_n)
    anchor_ref[Region.DOWNSTREAM_TOP] = (ref.L, ref.R_n)
    scale[Region.DOWNSTREAM_BOTTOM] = (sx[2], sy_in)
    anchor_src[Region.DOWNSTREAM_BOTTOM, 0] = src.L
    anchor_ref[Region.DOWNSTREAM_BOTTOM, 0] = ref.L
    for a in (scale, anchor_src, anchor_ref):
        a.setflags(write=False)
    return PiecewiseAffineMap(src, ref, scale, anchor_src, anchor_ref)


def idw_weights(src_points, query_points, k: int = 10):
    """Neighbour indices and normalized inverse-square-distance weights.

    Returns ``(idx, w)``, both of shape ``(J_query, k)``, neighbours sorted
    by distance. A query closer than 1e-12 to a source point receives weight
    one on that point and zero elsewhere.
    """
    src = as_points(src_points)
    qry = as_points(query_points)
    if src.shape[0] == 0:
        raise DomainError("source grid is empty")
    if k < 1 or src.shape[0] < k:
        raise DomainError(f"need at least k={k} source points, have {src.shape[0]}")
    dist, idx = cKDTree(src).query(qry, k=k)
    if k == 1:
        dist, idx = dist[:, None], idx[:, None]
    hit = dist[:, 0] < EXACT_HIT
    with np.errstate(divide="ignore"):
        w = 1.0 / dist[~hit] ** IDW_POWER
    w /= w.sum(axis=1, keepdims=True)
    weights = np.zeros(dist.shape)
    weights[~hit] = w
    weights[hit, 0] = 1.0
    return idx, weights


def idw_apply(idx: np.ndarray, weights: np.ndarray, src_values: np.ndarray) -> np.ndarray:
    v = np.asarray(src_values, dtype=float)
    if v.ndim == 1:
        return np.sum(weights * v[idx], axis=1)
    return np.sum(weights[:, :, None] * v[idx], axis=1)


def idw_interpolate(src_points, src_values, query_points, k: int = 10) -> np.ndarray:
    """Shepard interpolation of ``src_values`` (shape ``(J_src,)`` or
    ``(J_src, m)``) onto ``query_points``."""
    vals = np.asarray(src_values, dtype=float)
    if not np.all(np.isfinite(vals)):
        raise DomainError("source values must be finite")
    if vals.shape[0] != as_points(src_points).shape[0]:
        raise DomainError("source values do not match the source grid")
    idx, w = idw_weights(src_points, query_points, k)
    return idw_apply(idx, w, vals)


def select_reference(grids) -> int:
    """Index of the densest grid; the lowest index wins ties."""
    sizes = [as_points(g).shape[0] for g in grids]
    if not sizes:
        raise DomainError("no grids supplied")
    return int(np.argmax(sizes))
