"""Common proper orthogonal decomposition over runs with varying geometry.

All runs are rescaled onto the densest run's grid, the snapshot inner
product matrix ``Q = Y'Y`` (``Y`` is ``J x nT``) is eigendecomposed and the
spatial modes are recovered as normalized snapshot combinations ``Y a_k``.
Integrals are plain sums over grid points.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .errors import ConvergenceError, DomainError, ValidationError
from .grid import (GeometryParams, Grid, as_points, build_rescale_map,
                   idw_apply, idw_weights, select_reference)

logger = logging.getLogger(__name__)

DENSE_LIMIT = 512
RANK_RTOL = 1e-10
CLUSTER_RTOL = 1e-10


def inner_product_matrix(snapshots) -> np.ndarray:
    """Gram matrix ``Q[l, m] = sum_j Y[j, l] Y[j, m]`` of the snapshot columns."""
    Y = np.asarray(snapshots, dtype=float)
    if Y.ndim != 2:
        raise ValidationError(f"snapshots must be a J x N matrix, got shape {Y.shape}")
    Q = Y.T @ Y
    return 0.5 * (Q + Q.T)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made positive
    if vectors.size == 0:
        return vectors
    rows = np.argmax(np.abs(vectors), axis=0)
    s = np.sign(vectors[rows, np.arange(vectors.shape[1])])
    s[s == 0] = 1.0
    return vectors * s


def leading_eigenpairs(Q, M: int, method: str = "auto", maxiter: int | None = None):
    """Largest ``M`` eigenpairs of a symmetric positive semidefinite matrix.

    ``method`` is ``"dense"``, ``"lanczos"`` (implicitly restarted Lanczos
    via ARPACK) or ``"auto"``, which picks dense for ``N <= 512``.

    Returns
    -------
    values : (M,) array, descending
    vectors : (N, M) array with orthonormal columns
    """
    Q = np.asarray(Q, dtype=float)
    N = Q.shape[0]
    if Q.ndim != 2 or Q.shape[1] != N:
        raise ValidationError(f"Q must be square, got shape {Q.shape}")
    if not 1 <= M <= N:
        raise DomainError(f"need 1 <= M <= N={N}, got M={M}")
    scale = max(np.abs(Q).max(), 1e-300)
    if np.abs(Q - Q.T).max() > 1e-12 * scale:
        raise ValidationError("Q is not symmetric")
    if method not in ("auto", "dense", "lanczos"):
        raise ValueError(f"unknown eigensolver {method!r}")

    use_dense = method == "dense" or (method == "auto" and N <= DENSE_LIMIT) or M >= N - 1
    if use_dense:
        vals, vecs = np.linalg.eigh(Q)
        order = np.argsort(vals)[::-1][:M]
        vals, vecs = vals[order], vecs[:, order]
    else:
        v0 = np.random.default_rng(0).standard_normal(N)
        try:
            vals, vecs = eigsh(Q, k=M, which="LA", v0=v0, tol=0.0, maxiter=maxiter)
        except ArpackNoConvergence as exc:
            res = np.linalg.norm(Q @ exc.eigenvectors - exc.eigenvectors * exc.eigenvalues, axis=0)
            raise ConvergenceError(
                f"Lanczos did not converge: {len(exc.eigenvalues)} of {M} pairs", residuals=res
            ) from exc
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]

    vecs = _fix_signs(vecs)
    lam1 = max(vals[0], 0.0)
    res = np.linalg.norm(Q @ vecs - vecs * vals, axis=0)
    if lam1 > 0 and np.any(res > 1e-8 * lam1):
        raise ConvergenceError("eigenpair residuals exceed 1e-8 * lambda_1", residuals=res)
    return vals, vecs


def energy_ratio(eigenvalues, M: int, total: float | None = None) -> float:
    """Fraction of snapshot energy captured by the leading ``M`` modes.

    ``total`` defaults to the sum of ``eigenvalues``; pass ``trace(Q)`` when
    only the leading part of the spectrum was computed.
    """
    lam = np.clip(np.asarray(eigenvalues, dtype=float), 0.0, None)
    total = lam.sum() if total is None else float(total)
    if total <= 0:
        raise DomainError("energy ratio undefined for an all-zero spectrum")
    return float(min(lam[:M].sum() / total, 1.0))


def eigen_clusters(eigenvalues, rtol: float = CLUSTER_RTOL) -> list:
    """Group indices of (nearly) equal eigenvalues into blocks."""
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.size == 0:
        return []
    blocks, cur = [], [0]
    for i in range(1, lam.size):
        if abs(lam[i - 1] - lam[i]) <= rtol * max(abs(lam[0]), 1e-300):
            cur.append(i)
        else:
            blocks.append(cur)
            cur = [i]
    blocks.append(cur)
    return blocks


@dataclass
class CpodBasis:
    """Per-variable CPOD modes on the common grid.

    ``modes[var]`` is ``J x K_r`` with orthonormal columns; ``eigenvalues``
    holds the computed leading spectrum and ``total_energy`` the trace of Q.
    """

    variables: list
    common_grid: Grid
    reference_geometry: GeometryParams
    reference_index: int
    modes: dict
    eigenvalues: dict
    total_energy: dict
    mean_field: dict | None = None
    energy_target: float = 0.99
    idw_k: int = 10

    @property
    def K_r(self) -> dict:
        return {v: self.modes[v].shape[1] for v in self.variables}

    @property
    def K(self) -> int:
        return sum(self.K_r.values())

    @property
    def blocks(self) -> dict:
        """Slice of the stacked coefficient vector owned by each variable."""
        out, start = {}, 0
        for v in self.variables:
            out[v] = slice(start, start + self.modes[v].shape[1])
            start += self.modes[v].shape[1]
        return out

    @property
    def labels(self) -> list:
        return [(v, k) for v in self.variables for k in range(self.modes[v].shape[1])]

    def mask(self) -> np.ndarray:
        """Boolean ``K x K`` matrix, True where a precision entry may be nonzero."""
        owner = np.concatenate([np.full(self.modes[v].shape[1], i) for i, v in enumerate(self.variables)]
                               ) if self.K else np.zeros(0, dtype=int)
        allowed = owner[:, None] != owner[None, :]
        np.fill_diagonal(allowed, True)
        return allowed

    def transfer(self, geom: GeometryParams, grid):
        """IDW stencil from the common grid to ``grid`` of geometry ``geom``."""
        pts = as_points(grid)
        geom = geom.with_extent(pts)
        mapped = build_rescale_map(geom, self.reference_geometry).apply(pts)
        return idw_weights(self.common_grid.points, mapped, self.idw_k)

    def mapped_modes(self, var: str, geom: GeometryParams, grid, stencil=None) -> np.ndarray:
        """Modes of ``var`` carried to a run's grid, shape ``(J_target, K_r)``."""
        idx, w = stencil if stencil is not None else self.transfer(geom, grid)
        return idw_apply(idx, w, self.modes[var])

    def mapped_mean(self, var: str, geom: GeometryParams, grid, stencil=None) -> np.ndarray:
        idx, w = stencil if stencil is not None else self.transfer(geom, grid)
        if self.mean_field is None:
            return np.zeros(idx.shape[0])
        return idw_apply(idx, w, self.mean_field[var])

    def with_signs_flipped(self, var: str, k: int) -> CpodBasis:
        modes = dict(self.modes)
        modes[var] = modes[var].copy()
        modes[var][:, k] *= -1
        return CpodBasis(self.variables, self.common_grid, self.reference_geometry,
                         self.reference_index, modes, self.eigenvalues, self.total_energy,
                         self.mean_field, self.energy_target, self.idw_k)


def _orthonormalize(modes: np.ndarray) -> np.ndarray:
    G = modes.T @ modes
    if np.abs(G - np.eye(G.shape[0])).max() <= 1e-10:
        return modes
    # symmetric (Lowdin) orthonormalization keeps each mode closest to its original
    w, V = np.linalg.eigh(G)
    return modes @ (V / np.sqrt(w)) @ V.T


def _truncation(vals: np.ndarray, total: float, target: float) -> int:
    if total <= 0 or vals.size == 0 or vals[0] <= 0:
        return 0
    rank = int(np.sum(vals > RANK_RTOL * vals[0]))
    cum = np.cumsum(np.clip(vals[:rank], 0, None)) / total
    hit = np.flatnonzero(cum >= target - 1e-12)
    return int(hit[0]) + 1 if hit.size else rank


def pod_from_snapshots(Y: np.ndarray, energy_target: float, method: str = "auto", name: str = "?"):
    """POD of one variable's common-grid snapshot matrix ``Y`` (``J x N``).

    Returns ``(modes, coefficients, eigenvalues, total)`` with modes
    ``J x K_r`` and coefficients ``K_r x N``.
    """
    J, N = Y.shape
    Q = inner_product_matrix(Y)
    total = float(np.trace(Q))
    if total <= 0:
        warnings.warn(f"variable {name!r} is identically zero; keeping no modes", RuntimeWarning)
        return np.zeros((J, 0)), np.zeros((0, N)), np.zeros(0), 0.0

    use_dense = method == "dense" or (method == "auto" and N <= DENSE_LIMIT)
    if use_dense:
        vals, vecs = leading_eigenpairs(Q, N, method="dense")
    else:
        M = min(N, 16)
        while True:
            vals, vecs = leading_eigenpairs(Q, M, method="lanczos")
            small = vals[-1] <= RANK_RTOL * vals[0]
            if M >= N or small or vals.sum() / total >= energy_target - 1e-12:
                break
            M = min(N, 2 * M)

    K = min(_truncation(vals, total, energy_target), J)
    modes = Y @ vecs[:, :K]
    modes /= np.linalg.norm(modes, axis=0)
    modes = _fix_signs(_orthonormalize(modes))
    coeffs = modes.T @ Y
    return modes, coeffs, vals, total


def extract_basis(runs, maps=None, energy_target: float = 0.99, center_snapshots: bool = False,
                  idw_k: int = 10, method: str = "auto", threads: int = 1):
    """Compute the common POD of an ensemble of runs.

    Parameters
    ----------
    runs : list of SnapshotEnsemble
        Runs sharing the time-step count and the variable list.
    maps : list of PiecewiseAffineMap, optional
        Run-to-reference maps. Built from the run geometries when omitted.
    energy_target : float
        Each variable keeps the fewest modes whose energy ratio reaches it.
    center_snapshots : bool
        Subtract the ensemble-mean field of each variable before the
        decomposition (the mean is stored in the basis and added back).

    Returns
    -------
    basis : CpodBasis
    coefficients : ndarray, shape (T, n, K)
    """
    if not runs:
        raise ValidationError("no runs supplied")
    if not 0 < energy_target <= 1:
        raise DomainError(f"energy_target must be in (0, 1], got {energy_target}")
    variables = runs[0].variables
    T = runs[0].T
    for i, r in enumerate(runs):
        if r.variables != variables:
            raise ValidationError(f"run {i} has variables {r.variables}, expected {variables}")
        if r.T != T:
            raise ValidationError(f"run {i} has {r.T} time steps, expected {T}")

    ref = select_reference([r.grid for r in runs])
    common = runs[ref].grid
    ref_geom = runs[ref].geometry
    if maps is None:
        maps = [build_rescale_map(r.geometry, ref_geom) for r in runs]
    stencils = [idw_weights(m.apply(r.grid), common.points, idw_k) for r, m in zip(runs, maps)]
    n = len(runs)

    def one(var):
        # column l = i * T + t
        Y = np.hstack([idw_apply(idx, w, r.fields[var]) for r, (idx, w) in zip(runs, stencils)])
        mean = Y.mean(axis=1) if center_snapshots else np.zeros(Y.shape[0])
        if center_snapshots:
            Y = Y - mean[:, None]
        modes, coeffs, vals, total = pod_from_snapshots(Y, energy_target, method, var)
        logger.info("variable %s: K_r=%d of N=%d", var, modes.shape[1], Y.shape[1])
        return modes, coeffs, vals, total, mean

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, variables))
    else:
        results = [one(v) for v in variables]

    basis = CpodBasis(
        variables=list(variables),
        common_grid=common,
        reference_geometry=ref_geom,
        reference_index=ref,
        modes={v: r[0] for v, r in zip(variables, results)},
        eigenvalues={v: r[2] for v, r in zip(variables, results)},
        total_energy={v: r[3] for v, r in zip(variables, results)},
        mean_field={v: r[4] for v, r in zip(variables, results)} if center_snapshots else None,
        energy_target=energy_target,
        idw_k=idw_k,
    )
    blocks = [r[1].reshape(r[1].shape[0], n, T).transpose(2, 1, 0) for r in results]
    coeffs = np.concatenate(blocks, axis=2) if blocks else np.zeros((T, n, 0))
    return basis, coeffs


def common_grid_snapshots(basis: CpodBasis, run, var: str) -> np.ndarray:
    """A run's ``var`` field rescaled and interpolated to the common grid."""
    m = build_rescale_map(run.geometry, basis.reference_geometry)
    idx, w = idw_weights(m.apply(run.grid), basis.common_grid.points, basis.idw_k)
    return idw_apply(idx, w, run.fields[var])


def reconstruct(basis: CpodBasis, coeffs_run: np.ndarray, geom: GeometryParams, grid, var: str) -> np.ndarray:
    """Truncated expansion ``sum_k beta_k M{phi_k}`` on a run grid.

    ``coeffs_run`` is ``(T, K)`` for one run; the result is ``J x T``.
    """
    stencil = basis.transfer(geom, grid)
    phi = basis.mapped_modes(var, geom, grid, stencil)
    beta = np.atleast_2d(coeffs_run)[:, basis.blocks[var]]
    return phi @ beta.T + basis.mapped_mean(var, geom, grid, stencil)[:, None]
