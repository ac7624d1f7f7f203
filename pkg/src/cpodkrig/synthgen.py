"""Synthetic ensembles with known modes and known co-kriging parameters.

Every run shares one structured reference grid that is stretched onto the
run's geometry with the region-wise affine map, so the rescaled grids of all
runs coincide with the reference grid point for point. Fields are

    Y_r(x, t; c_i) = sum_k beta_k(t; c_i) phi_k^{(r)}(x) (+ optional noise),

with coefficients drawn per time step from the separable Gaussian process
``vec(B_t) ~ N(1 (x) mu, R_tau (x) T)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .archive import SnapshotEnsemble, dump_json, load_json, write_archive
from .cokrige import DesignScaler, correlation_matrix
from .cpod import _fix_signs
from .errors import ParameterError
from .grid import PARAM_NAMES, TABLE_RANGES, GeometryParams, Grid, build_rescale_map

# downstream lengths (mm) added to L and R_n to close the domain
DOWNSTREAM_X = 40.0
DOWNSTREAM_Y = 10.0


def space_filling_design(p: int, n: int, seed: int = 0) -> np.ndarray:
    """Seeded Latin hypercube of ``n`` points in ``[0, 1]^p``."""
    if n < 1 or p < 1:
        raise ParameterError(f"need n >= 1 and p >= 1, got n={n}, p={p}")
    return qmc.LatinHypercube(d=p, seed=seed).random(n)


@dataclass
class GridShape:
    """Point counts of the structured reference grid per region strip."""

    nx_a: int = 4
    nx_b: int = 12
    nx_d: int = 12
    ny_in: int = 10
    ny_top: int = 10

    @property
    def J(self) -> int:
        return (self.nx_a + self.nx_b + self.nx_d) * self.ny_in + self.nx_d * self.ny_top


def structured_grid(geom: GeometryParams, shape: GridShape = GridShape()) -> np.ndarray:
    """Tensor grid aligned with the four regions of ``geom``."""
    xa = np.linspace(0.0, geom.dL, shape.nx_a)
    xb = geom.dL + (geom.L - geom.dL) * np.arange(1, shape.nx_b + 1) / shape.nx_b
    xd = geom.L + (geom.x_max - geom.L) * np.arange(1, shape.nx_d + 1) / shape.nx_d
    y_in = np.linspace(0.0, geom.R_n, shape.ny_in)
    y_top = geom.R_n + (geom.y_max - geom.R_n) * np.arange(1, shape.ny_top + 1) / shape.ny_top
    lower = [(x, y) for x in np.concatenate([xa, xb, xd]) for y in y_in]
    upper = [(x, y) for x in xd for y in y_top]
    return np.array(lower + upper)


def analytic_profiles(points: np.ndarray, count: int, phase: float) -> np.ndarray:
    """Smooth products of sinusoids in normalized coordinates, one column
    per profile."""
    xi = points[:, 0] / points[:, 0].max()
    eta = points[:, 1] / points[:, 1].max()
    cols = []
    for k in range(count):
        cols.append(np.cos(np.pi * (k + 0.5) * xi + phase) * np.cos(0.5 * np.pi * (k % 3 + 1) * eta - phase)
                    + 0.3 * np.sin(np.pi * (k + 1) * eta * xi + 2.0 * phase) + (1.0 if k == 0 else 0.0))
    return np.column_stack(cols) if cols else np.zeros((points.shape[0], 0))


def orthonormal_modes(points: np.ndarray, count: int, phase: float) -> np.ndarray:
    Q, _ = np.linalg.qr(analytic_profiles(points, count, phase))
    return _fix_signs(Q)


@dataclass
class SyntheticSpec:
    """Everything needed to draw a synthetic ensemble.

    ``mu``, ``T_cov`` and ``tau`` are the true co-kriging parameters of the
    stacked coefficient vector, ordered variable by variable following
    ``variables`` and ``modes_per_variable``. ``designs`` are unit-cube
    points over ``design_variables``; the remaining geometry parameters sit
    at the middle of their design ranges.
    """

    variables: list
    modes_per_variable: list
    mu: np.ndarray
    T_cov: np.ndarray
    tau: np.ndarray
    n_steps: int
    designs: np.ndarray | None = None
    n_runs: int = 12
    design_variables: tuple = ("L", "R_n")
    noise: float = 0.0
    seed: int = 0
    grid_shape: GridShape = field(default_factory=GridShape)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.T_cov = np.atleast_2d(np.asarray(self.T_cov, dtype=float))
        self.tau = np.atleast_1d(np.asarray(self.tau, dtype=float))
        self.design_variables = tuple(self.design_variables)
        K = int(sum(self.modes_per_variable))
        if len(self.variables) != len(self.modes_per_variable):
            raise ParameterError("one mode count per variable is required")
        if self.mu.shape != (K,) or self.T_cov.shape != (K, K):
            raise ParameterError(f"mu and T_cov must have K={K} entries")
        if not np.allclose(self.T_cov, self.T_cov.T, atol=1e-12) or np.linalg.eigvalsh(self.T_cov).min() <= 0:
            raise ParameterError("T_cov must be symmetric positive definite")
        if self.tau.size != self.p or np.any(self.tau <= 0) or np.any(self.tau >= 1):
            raise ParameterError(f"tau must have {self.p} entries in (0, 1)")
        if any(v not in PARAM_NAMES for v in self.design_variables):
            raise ParameterError(f"unknown design variables {self.design_variables}")
        if self.designs is None:
            self.designs = space_filling_design(self.p, self.n_runs, self.seed)
        self.designs = np.atleast_2d(np.asarray(self.designs, dtype=float))
        if self.designs.shape[1] != self.p or np.any(self.designs < 0) or np.any(self.designs > 1):
            raise ParameterError(f"designs must be points in [0, 1]^{self.p}")
        self.n_runs = self.designs.shape[0]
        if self.n_steps < 1:
            raise ParameterError("n_steps must be >= 1")
        if self.noise < 0:
            raise ParameterError("noise must be >= 0")

    @property
    def p(self) -> int:
        return len(self.design_variables)

    @property
    def K(self) -> int:
        return int(sum(self.modes_per_variable))

    @property
    def scaler(self) -> DesignScaler:
        return DesignScaler.from_table(self.design_variables)

    def geometry(self, unit_point) -> GeometryParams:
        mid = {n: 0.5 * sum(TABLE_RANGES[n]) for n in PARAM_NAMES}
        raw = self.scaler.unscale(unit_point)
        mid.update(dict(zip(self.design_variables, raw)))
        return GeometryParams(**mid, x_max=mid["L"] + DOWNSTREAM_X, y_max=mid["R_n"] + DOWNSTREAM_Y)

    @property
    def reference_geometry(self) -> GeometryParams:
        return self.geometry(np.full(self.p, 0.5))

    def reference_points(self) -> np.ndarray:
        return structured_grid(self.reference_geometry, self.grid_shape)

    def true_modes(self) -> dict:
        pts = self.reference_points()
        return {v: orthonormal_modes(pts, k, 0.4 * r)
                for r, (v, k) in enumerate(zip(self.variables, self.modes_per_variable))}

    def blocks(self) -> dict:
        out, start = {}, 0
        for v, k in zip(self.variables, self.modes_per_variable):
            out[v] = slice(start, start + k)
            start += k
        return out

    def to_dict(self) -> dict:
        return {
            "variables": list(self.variables),
            "modes_per_variable": [int(k) for k in self.modes_per_variable],
            "mu": self.mu.tolist(),
            "T_cov": self.T_cov.tolist(),
            "tau": self.tau.tolist(),
            "n_steps": int(self.n_steps),
            "designs": self.designs.tolist(),
            "design_variables": list(self.design_variables),
            "noise": float(self.noise),
            "seed": int(self.seed),
            "grid_shape": dict(self.grid_shape.__dict__),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        d = dict(d)
        if "grid_shape" in d:
            d["grid_shape"] = GridShape(**d["grid_shape"])
        if "precision" in d and "T_cov" not in d:
            d["T_cov"] = np.linalg.inv(np.asarray(d.pop("precision"), dtype=float))
        return cls(**d)

    def save(self, path) -> None:
        dump_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> SyntheticSpec:
        return cls.from_dict(load_json(path))


def draw_coefficients(spec: SyntheticSpec, designs=None, rng=None) -> np.ndarray:
    """Coefficient draws ``(T, n, K)``, independent across time steps."""
    designs = spec.designs if designs is None else np.atleast_2d(designs)
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n = designs.shape[0]
    R = correlation_matrix(spec.tau, designs)
    LR = np.linalg.cholesky(R + 1e-12 * np.eye(n))
    LT = np.linalg.cholesky(spec.T_cov)
    Z = rng.standard_normal((spec.n_steps, n, spec.K))
    return spec.mu + np.einsum("ab,tbk,lk->tal", LR, Z, LT)


def synthesize(spec: SyntheticSpec, unit_point, coeffs_run: np.ndarray, rng=None,
               modes: dict | None = None) -> SnapshotEnsemble:
    """Build one run's archive from its ``(T, K)`` coefficients."""
    geom = spec.geometry(unit_point)
    ref_pts = spec.reference_points()
    pts = build_rescale_map(spec.reference_geometry, geom).apply(ref_pts)
    modes = spec.true_modes() if modes is None else modes
    blocks = spec.blocks()
    fields = {}
    for v in spec.variables:
        Y = modes[v] @ coeffs_run[:, blocks[v]].T
        if spec.noise > 0:
            Y = Y + spec.noise * rng.standard_normal(Y.shape)
        fields[v] = Y
    return SnapshotEnsemble(geom, Grid(pts), fields)


def generate(spec: SyntheticSpec, extra_designs=None, out_dir=None):
    """Draw the training ensemble (plus optional held-out runs).

    The held-out runs at ``extra_designs`` are drawn jointly with the
    training runs from the same Gaussian process, so they are valid test
    cases for the co-kriging predictor.

    Returns
    -------
    runs : list of SnapshotEnsemble (training runs first, then held-out runs)
    coeffs : ndarray (T, n_total, K) of the true coefficients
    """
    rng = np.random.default_rng(spec.seed)
    designs = spec.designs
    if extra_designs is not None:
        designs = np.vstack([designs, np.atleast_2d(extra_designs)])
    coeffs = draw_coefficients(spec, designs, rng)
    modes = spec.true_modes()
    runs = [synthesize(spec, c, coeffs[:, i], rng, modes) for i, c in enumerate(designs)]
    if out_dir is not None:
        from pathlib import Path
        for i, run in enumerate(runs):
            write_archive(Path(out_dir) / f"run{i:03d}", run)
    return runs, coeffs


def coupled_precision(K: int, strong=((0, 1, 0.6),), weak=(), diag: float = 1.0) -> np.ndarray:
    """A precision matrix with the given off-diagonal entries
    ``(i, j, partial correlation)`` and unit-scaled diagonal."""
    P = np.eye(K) * diag
    for i, j, r in list(strong) + list(weak):
        P[i, j] = P[j, i] = -r * diag
    if np.linalg.eigvalsh(P).min() <= 0:
        raise ParameterError("planted couplings give an indefinite precision")
    return P


def reference_spec(seed: int = 0, n_runs: int = 12, n_steps: int = 50) -> SyntheticSpec:
    """The reference synthetic case: two variables with two modes each over
    the design variables ``(L, R_n)``, on a 400-point grid.

    Each variable has a dominant mean mode, so fields stay well away from
    zero and relative errors are meaningful.
    """
    mu = np.array([10.0, 0.0, 8.0, 0.0])
    P = coupled_precision(4, strong=((0, 2, 0.5),), weak=((1, 3, 0.3),))
    scale = np.diag([1.0, 0.6, 1.0, 0.6])
    T = scale @ np.linalg.inv(P) @ scale
    return SyntheticSpec(variables=["u", "p"], modes_per_variable=[2, 2], mu=mu, T_cov=T,
                         tau=np.array([0.5, 0.6]), n_steps=n_steps, n_runs=n_runs, seed=seed)
