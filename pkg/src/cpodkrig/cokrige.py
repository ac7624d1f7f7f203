"""Separable co-kriging model for the stacked CPOD coefficient vector.

At a fixed time step the ``K`` coefficients follow a Gaussian process with
mean ``mu`` and cross-covariance ``r_tau(c1, c2) * T``, where

    r_tau(c1, c2) = prod_j tau_j ** (4 (c1_j - c2_j)**2),   0 < tau_j < 1,

is a squared-exponential correlation written on a bounded scale. Design
points are scaled to the unit cube before any kernel evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, cholesky, LinAlgError
from scipy.special import gammainc

from .errors import ConditioningError, ParameterError
from .grid import PARAM_NAMES, TABLE_RANGES

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class DesignScaler:
    """Affine map of raw design variables onto ``[0, 1]^p``."""

    names: tuple
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.shape != (len(self.names),):
            raise ParameterError("design ranges must match the variable names")
        if np.any(hi <= lo):
            raise ParameterError(f"design ranges need min < max, got {list(zip(lo, hi))}")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def from_table(cls, names=PARAM_NAMES, ranges=None) -> DesignScaler:
        ranges = TABLE_RANGES if ranges is None else ranges
        return cls(tuple(names), np.array([ranges[n][0] for n in names], dtype=float),
                   np.array([ranges[n][1] for n in names], dtype=float))

    def scale(self, raw) -> np.ndarray:
        return (np.asarray(raw, dtype=float) - self.lower) / (self.upper - self.lower)

    def unscale(self, unit) -> np.ndarray:
        return self.lower + np.asarray(unit, dtype=float) * (self.upper - self.lower)

    def geometry_vector(self, geom) -> np.ndarray:
        return self.scale(geom.as_vector(self.names))

    def to_dict(self) -> dict:
        return {"names": list(self.names), "lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d) -> DesignScaler:
        return cls(tuple(d["names"]), np.asarray(d["lower"]), np.asarray(d["upper"]))


def check_tau(tau) -> np.ndarray:
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if tau.ndim != 1 or np.any(~np.isfinite(tau)) or np.any(tau <= 0) or np.any(tau >= 1):
        raise ParameterError(f"tau must lie strictly inside (0, 1), got {tau}")
    return tau


def correlation(tau, c1, c2) -> float:
    """``prod_j tau_j ** (4 (c1_j - c2_j)**2)`` for two design points."""
    tau = check_tau(tau)
    d = np.atleast_1d(np.asarray(c1, dtype=float)) - np.atleast_1d(np.asarray(c2, dtype=float))
    return float(np.exp(np.sum(4.0 * d**2 * np.log(tau))))


def correlation_matrix(tau, X1, X2=None) -> np.ndarray:
    tau = check_tau(tau)
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = X1 if X2 is None else np.atleast_2d(np.asarray(X2, dtype=float))
    d2 = (X1[:, None, :] - X2[None, :, :]) ** 2
    return np.exp(np.einsum("abj,j->ab", d2, 4.0 * np.log(tau)))


def nearest_pair(X) -> tuple[int, int] | None:
    X = np.atleast_2d(X)
    if X.shape[0] < 2:
        return None
    d = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    d[np.diag_indices_from(d)] = np.inf
    i, j = np.unravel_index(np.argmin(d), d.shape)
    return (int(min(i, j)), int(max(i, j)))


def factor_correlation(R, designs=None):
    """Cholesky factor of a correlation matrix with a jitter fallback.

    Jitter ``1e-10 .. 1e-6`` is added to the diagonal only after a plain
    factorization fails. Returns ``(lower_factor, jitter)``.
    """
    n = R.shape[0]
    for eps in JITTER_LADDER:
        try:
            L = cholesky(R + eps * np.eye(n) if eps else R, lower=True, check_finite=False)
        except LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, eps
    pair = nearest_pair(designs) if designs is not None else None
    where = f"; closest design points are {pair[0]} and {pair[1]}" if pair else ""
    raise ConditioningError(f"correlation matrix is numerically singular{where}", pair=pair)


@dataclass(frozen=True)
class GpModelSlice:
    """Fitted parameters of one time step plus the training data.

    ``designs`` are already scaled to the unit cube; ``B`` is ``n x K``.
    ``precision`` is the sparse inverse of ``T_cov`` when the slice was
    fitted with the graphical LASSO block.
    """

    mu: np.ndarray
    T_cov: np.ndarray
    tau: np.ndarray
    designs: np.ndarray
    B: np.ndarray
    precision: np.ndarray | None = None
    lam: float = 0.0
    nll: float = float("nan")
    chol: np.ndarray = field(default=None, repr=False, compare=False)
    jitter: float = field(default=0.0, repr=False, compare=False)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        T = np.atleast_2d(np.asarray(self.T_cov, dtype=float))
        designs = np.atleast_2d(np.asarray(self.designs, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(designs.shape[0], mu.shape[0])
        tau = check_tau(self.tau)
        if T.shape != (mu.size, mu.size):
            raise ParameterError(f"T_cov must be {mu.size}x{mu.size}, got {T.shape}")
        if np.abs(T - T.T).max(initial=0.0) > 1e-10 * max(np.abs(T).max(initial=0.0), 1.0):
            raise ParameterError("T_cov is not symmetric")
        if mu.size and np.linalg.eigvalsh(T).min() <= 0:
            raise ParameterError("T_cov is not positive definite")
        if designs.shape[1] != tau.size:
            raise ParameterError(f"designs have {designs.shape[1]} columns but tau has {tau.size}")
        for name, v in (("mu", mu), ("T_cov", T), ("tau", tau), ("designs", designs), ("B", B)):
            object.__setattr__(self, name, v)
        if self.chol is None:
            L, eps = factor_correlation(correlation_matrix(tau, designs), designs)
            object.__setattr__(self, "chol", L)
            object.__setattr__(self, "jitter", eps)

    @property
    def n(self) -> int:
        return self.designs.shape[0]

    @property
    def K(self) -> int:
        return self.mu.size

    def independent(self) -> GpModelSlice:
        """The same slice with cross-covariances dropped (``T -> diag(T)``)."""
        return replace(self, T_cov=np.diag(np.diag(self.T_cov)), precision=None)

    def weights(self, c_new):
        """``(r_new, R^{-1} r_new)`` for one or several new design points."""
        C = np.atleast_2d(np.asarray(c_new, dtype=float))
        r = correlation_matrix(self.tau, self.designs, C)  # n x m
        return r, cho_solve((self.chol, True), r, check_finite=False)


def variance_factor(model: GpModelSlice, c_new) -> np.ndarray:
    """``1 - r' R^{-1} r`` at each new point (shape ``(m,)``)."""
    r, u = model.weights(c_new)
    return 1.0 - np.sum(r * u, axis=0)


def predict_coefficients(model: GpModelSlice, c_new):
    """MMSE predictor and predictive covariance at a scaled design point.

    mean = mu + (B - 1 mu')' R^{-1} r_new
    cov  = (1 - r_new' R^{-1} r_new) T
    """
    r, u = model.weights(c_new)
    u = u[:, 0]
    mean = model.mu + (model.B - model.mu).T @ u
    s = max(1.0 - float(r[:, 0] @ u), 0.0)
    return mean, s * model.T_cov


def predict_many(model: GpModelSlice, C):
    """Vectorized predictor: means ``(m, K)`` and variance factors ``(m,)``."""
    r, u = model.weights(C)
    means = model.mu + u.T @ (model.B - model.mu)
    s = np.clip(1.0 - np.sum(r * u, axis=0), 0.0, None)
    return means, s


def chi2_quantile(prob: float, dof: int, rtol: float = 1e-13) -> float:
    """Quantile of a chi-square law by bisection on the regularized lower
    incomplete gamma function, to relative width ``rtol``."""
    if not 0 <= prob < 1:
        raise ParameterError(f"probability must be in [0, 1), got {prob}")
    if prob == 0:
        return 0.0
    a = dof / 2.0
    lo, hi = 0.0, max(1.0, float(dof))
    while gammainc(a, hi / 2.0) < prob:
        lo, hi = hi, 2.0 * hi
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if gammainc(a, mid / 2.0) < prob:
            lo = mid
        else:
            hi = mid
        if hi - lo <= rtol * hi:
            break
    return 0.5 * (lo + hi)


def hdcr_contains(model: GpModelSlice, c_new, beta_obs, alpha: float,
                  assume_independent: bool = False) -> bool:
    """Whether ``beta_obs`` lies in the ``100(1 - alpha)%`` highest-density
    region of the predictive law (or of its independent-mode counterpart)."""
    if not 0 < alpha < 1:
        raise ParameterError(f"alpha must be in (0, 1), got {alpha}")
    mean, _ = predict_coefficients(model, c_new)
    s = float(variance_factor(model, c_new)[0])
    d = np.asarray(beta_obs, dtype=float) - mean
    if s <= 1e-14:
        return bool(np.all(d == 0))
    D = np.diag(np.diag(model.T_cov)) if assume_independent else model.T_cov
    m2 = float(d @ np.linalg.solve(D, d))
    return m2 <= s * chi2_quantile(1.0 - alpha, model.K)


def hdcr_statistic(T_cov, d, s, assume_independent=False):
    """Scaled Mahalanobis distances ``d' D^{-1} d / s`` for rows of ``d``."""
    D = np.diag(np.diag(T_cov)) if assume_independent else np.asarray(T_cov)
    d = np.atleast_2d(d)
    return np.einsum("ij,ij->i", d, np.linalg.solve(D, d.T).T) / s
