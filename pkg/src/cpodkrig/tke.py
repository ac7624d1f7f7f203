"""Turbulent kinetic energy prediction and its exact predictive law.

With the velocity components at a point jointly Gaussian,
``Y ~ N(y_hat, Phi)``, the kinetic energy about fixed time means ``y_bar``

    kappa = 1/2 * ||Y - y_bar||^2

is distributed as ``sum_j (lam_j / 2) * chi2_1(mu_j**2)`` where
``Phi = U diag(lam) U'`` and ``mu = lam^{-1/2} U' (y_hat - y_bar)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, stats
from scipy.optimize import brentq

from .cokrige import DesignScaler
from .cpod import CpodBasis
from .errors import ConvergenceError, ParameterError, ValidationError
from .grid import GeometryParams, as_points
from .predictor import _check_models, predicted_coefficients, scaled_design

VELOCITY = ("u", "v", "w")
NULL_RTOL = 1e-12
CDF_TOL = 1e-6
MAX_HEAD_PERIODS = 512


@dataclass(frozen=True)
class WncqDistribution:
    """Law of ``offset + sum_j weights_j * chi2_1(noncentralities_j)``."""

    weights: np.ndarray
    noncentralities: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        d = np.atleast_1d(np.asarray(self.noncentralities, dtype=float))
        if w.shape != d.shape or w.ndim != 1:
            raise ParameterError("weights and noncentralities must be 1-D and of equal length")
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ParameterError("weights must be positive and finite")
        if np.any(~np.isfinite(d)) or np.any(d < 0):
            raise ParameterError("noncentralities must be finite and >= 0")
        if not np.isfinite(self.offset):
            raise ParameterError("offset must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "noncentralities", d)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def degenerate(self) -> bool:
        return self.weights.size == 0

    @property
    def mean(self) -> float:
        return self.offset + float(np.sum(self.weights * (1.0 + self.noncentralities)))

    @property
    def variance(self) -> float:
        return float(np.sum(2.0 * self.weights**2 * (1.0 + 2.0 * self.noncentralities)))

    def sample(self, size: int, rng) -> np.ndarray:
        z = rng.standard_normal((size, self.weights.size)) + np.sqrt(self.noncentralities)
        return self.offset + (z**2) @ self.weights


def _imhof(w, d, q, tol):
    """``P(sum w_j chi2_1(d_j) <= q)`` by numerical inversion of the
    characteristic function.

    The integrand is ``sin(theta(u) - q u / 2) / (u rho(u))``. The problem
    is first rescaled so the largest weight is one. Noncentral terms give
    the envelope ``1 / (u rho(u))`` a Gaussian factor that saturates once
    ``w_j u >> 1``; the head is integrated adaptively past that point (or
    until the envelope is negligible, or a fixed number of periods), after
    which the envelope decays algebraically and the oscillatory tail is
    split into cosine and sine parts for a Fourier-integral routine.
    """
    if q <= 0:
        return 0.0, 0.0
    scale = float(w.max())
    w = w / scale
    q = q / scale
    w2 = w * w

    def theta_t(u):
        wu = w * u
        return 0.5 * np.sum(np.arctan(wu) + d * wu / (1.0 + wu * wu))

    def inv_urho(u):
        wu2 = w2 * u * u
        log_rho = 0.25 * np.sum(np.log1p(wu2)) + 0.5 * np.sum(d * wu2 / (1.0 + wu2))
        return np.exp(-log_rho) / u

    def head(u):
        if u == 0.0:
            return 0.5 * np.sum(w * (1.0 + d)) - 0.5 * q
        return np.sin(theta_t(u) - 0.5 * q * u) * inv_urho(u)

    omega = 0.5 * q
    period = 2.0 * np.pi / omega
    eps = 1e-3 * tol
    negligible = eps * min(1.0, omega)

    def attempt(a):
        total, err = integrate.quad(head, 0.0, a, epsabs=eps, epsrel=0.0,
                                    limit=max(1000, int(50 * a / period)))
        if inv_urho(a) > negligible:
            for weight, fn in (("cos", lambda u: np.sin(theta_t(u)) * inv_urho(u)),
                               ("sin", lambda u: -np.cos(theta_t(u)) * inv_urho(u))):
                v, e = integrate.quad(fn, a, np.inf, weight=weight, wvar=omega, epsabs=eps, limlst=200)
                total += v
                err += e
        return total, err

    strong = d >= 1.0
    u_sat = 10.0 / float(w[strong].min()) if strong.any() else 0.0
    a = 4.0 * period
    while a < min(u_sat, MAX_HEAD_PERIODS * period) and inv_urho(a) > negligible:
        a = min(2.0 * a, MAX_HEAD_PERIODS * period)
    total, err = attempt(a)
    p = 0.5 - total / np.pi
    return p, err / np.pi


def _liu(w, d, q):
    # moment matching to a scaled noncentral chi-square (Liu, Tang and Zhang)
    c = [np.sum(w**k) + k * np.sum(w**k * d) for k in (1, 2, 3, 4)]
    s1, s2 = c[2] / c[1] ** 1.5, c[3] / c[1] ** 2
    if s1**2 > s2:
        a = 1.0 / (s1 - np.sqrt(s1**2 - s2))
        delta = s1 * a**3 - a**2
        dof = a**2 - 2.0 * delta
    else:
        a = 1.0 / s1
        delta = 0.0
        dof = 1.0 / s1**2
    t = (q - c[0]) / np.sqrt(2.0 * c[1])
    x = t * np.sqrt(2.0) * a + dof + delta
    if delta > 0:
        return float(stats.ncx2.cdf(x, dof, delta))
    return float(stats.chi2.cdf(x, dof))


def wncq_cdf(dist: WncqDistribution, q: float, method: str = "imhof", tol: float = CDF_TOL) -> float:
    """Distribution function of a weighted sum of noncentral chi-square
    variables.

    ``method="imhof"`` inverts the characteristic function numerically with
    an absolute error target ``tol``; ``method="liu"`` uses a four-moment
    approximation.
    """
    q = float(q)
    if not np.isfinite(q):
        if np.isnan(q):
            raise ParameterError("q must not be NaN")
        return 1.0 if q > 0 else 0.0
    x = q - dist.offset
    if dist.degenerate:
        return 1.0 if x >= 0 else 0.0
    if x <= 0:
        return 0.0
    if method == "liu":
        return min(max(_liu(dist.weights, dist.noncentralities, x), 0.0), 1.0)
    if method != "imhof":
        raise ParameterError(f"unknown method {method!r}")
    p, err = _imhof(dist.weights, dist.noncentralities, x, tol)
    if err > tol:
        raise ConvergenceError(f"Imhof quadrature error bound {err:.2e} exceeds {tol:.0e}", residuals=err)
    return min(max(p, 0.0), 1.0)


def wncq_quantile(dist: WncqDistribution, prob: float, method: str = "imhof") -> float:
    """Smallest ``q`` with ``CDF(q) = prob``, by bracketing and bisection."""
    if not 0 < prob < 1:
        raise ParameterError(f"probability must be in (0, 1), got {prob}")
    if dist.degenerate:
        return dist.offset
    f = lambda q: wncq_cdf(dist, q, method) - prob
    lo = dist.offset
    hi = dist.mean + 4.0 * np.sqrt(dist.variance)
    while f(hi) < 0:
        lo, hi = hi, dist.offset + 2.0 * (hi - dist.offset)
    return float(brentq(f, lo, hi, xtol=1e-14, rtol=1e-12, maxiter=200))


def tke_confidence_band(dist: WncqDistribution, level: float, side: str = "lower", method: str = "imhof"):
    """Pointwise confidence bound(s) for kappa.

    ``side="lower"`` returns ``q`` with ``P(kappa >= q) = level``,
    ``"upper"`` returns ``q`` with ``P(kappa <= q) = level`` and
    ``"two_sided"`` returns the equal-tailed pair holding ``level``.
    """
    if not 0 < level < 1:
        raise ParameterError(f"level must be in (0, 1), got {level}")
    if side == "lower":
        return wncq_quantile(dist, 1.0 - level, method)
    if side == "upper":
        return wncq_quantile(dist, level, method)
    if side == "two_sided":
        tail = 0.5 * (1.0 - level)
        return wncq_quantile(dist, tail, method), wncq_quantile(dist, 1.0 - tail, method)
    raise ParameterError(f"unknown side {side!r}")


def distribution_from_moments(y_hat, y_bar, Phi) -> WncqDistribution:
    """Law of ``1/2 ||Y - y_bar||^2`` for ``Y ~ N(y_hat, Phi)``.

    Eigenvalues at most ``1e-12 * lam_max`` are treated as zero; the part of
    ``y_hat - y_bar`` in their span enters as a constant offset.
    """
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    diff = np.asarray(y_hat, dtype=float) - np.asarray(y_bar, dtype=float)
    lam, U = np.linalg.eigh(0.5 * (Phi + Phi.T))
    top = lam.max(initial=0.0)
    keep = lam > NULL_RTOL * top if top > 0 else np.zeros(lam.size, dtype=bool)
    proj = U.T @ diff
    nc = proj[keep] ** 2 / lam[keep]
    return WncqDistribution(0.5 * lam[keep], nc, 0.5 * float(np.sum(proj[~keep] ** 2)))


@dataclass
class VelocityMoments:
    """Predicted velocity means ``(P, T, V)`` and covariances ``(P, T, V, V)``
    at ``P`` points for ``T`` time steps."""

    y_hat: np.ndarray
    Phi: np.ndarray
    variables: tuple


def velocity_moments(basis: CpodBasis, models, c_new: GeometryParams, points,
                     velocity=VELOCITY, scaler: DesignScaler | None = None,
                     steps=None) -> VelocityMoments:
    """Predictive mean and covariance of the velocity vector at ``points``.

    ``Phi = M V M'`` with ``M`` the block-diagonal matrix of mapped mode rows
    and ``V`` the velocity block of the predictive coefficient covariance.
    ``points`` are coordinates in the geometry ``c_new``; the downstream
    extent of ``c_new`` must be set.
    """
    models = _check_models(basis, models)
    velocity = tuple(velocity)
    missing = [v for v in velocity if v not in basis.variables]
    if missing:
        raise ValidationError(f"velocity variables {missing} are not in the basis")
    if c_new.x_max is None or c_new.y_max is None:
        raise ValidationError("the new geometry needs its downstream extent (X_max, Y_max)")
    pts = as_points(points)
    steps = range(len(models)) if steps is None else list(steps)
    sub = [models[t] for t in steps]
    c = scaled_design(c_new, sub, scaler)
    beta, s = predicted_coefficients(sub, c)
    stencil = basis.transfer(c_new, pts)
    blocks = basis.blocks
    idx = np.concatenate([np.arange(basis.K)[blocks[v]] for v in velocity])
    P, V, Tn = pts.shape[0], len(velocity), len(sub)
    M = np.zeros((P, V, idx.size))
    y_hat = np.zeros((P, Tn, V))
    col = 0
    for r, v in enumerate(velocity):
        phi = basis.mapped_modes(v, c_new, pts, stencil)
        k = phi.shape[1]
        M[:, r, col:col + k] = phi
        col += k
        y_hat[:, :, r] = phi @ beta[:, blocks[v]].T + basis.mapped_mean(v, c_new, pts, stencil)[:, None]
    Tuvw = np.array([m.T_cov[np.ix_(idx, idx)] for m in sub])  # (T, Ku, Ku)
    Phi = np.einsum("pak,tkl,pbl->ptab", M, s[:, None, None] * Tuvw, M)
    return VelocityMoments(y_hat, Phi, velocity)


def phi_matrix(basis: CpodBasis, models, c_new: GeometryParams, x, t: int,
               velocity=VELOCITY, scaler: DesignScaler | None = None) -> np.ndarray:
    """Predictive velocity covariance at one point and time step."""
    return velocity_moments(basis, models, c_new, x, velocity, scaler, steps=[t]).Phi[0, 0]


def tke_from_moments(y_hat, y_bar, Phi) -> np.ndarray:
    """MMSE predictor ``1/2 ||y_hat - y_bar||^2 + 1/2 tr(Phi)`` (broadcasts
    over leading axes)."""
    d = np.asarray(y_hat) - np.asarray(y_bar)
    return 0.5 * np.sum(d**2, axis=-1) + 0.5 * np.trace(Phi, axis1=-2, axis2=-1)


def tke_predict(basis: CpodBasis, models, c_new: GeometryParams, x, t: int, time_means,
                velocity=VELOCITY, scaler: DesignScaler | None = None) -> float:
    """Predicted kinetic energy at one point; ``time_means`` maps each
    velocity variable to its time mean at ``x``."""
    mom = velocity_moments(basis, models, c_new, x, velocity, scaler, steps=[t])
    y_bar = np.array([float(np.ravel(time_means[v])[0]) for v in mom.variables])
    return float(tke_from_moments(mom.y_hat[0, 0], y_bar, mom.Phi[0, 0]))


def tke_distribution(basis: CpodBasis, models, c_new: GeometryParams, x, t: int, time_means,
                     velocity=VELOCITY, scaler: DesignScaler | None = None) -> WncqDistribution:
    mom = velocity_moments(basis, models, c_new, x, velocity, scaler, steps=[t])
    y_bar = np.array([float(np.ravel(time_means[v])[0]) for v in mom.variables])
    return distribution_from_moments(mom.y_hat[0, 0], y_bar, mom.Phi[0, 0])


def kinetic_energy(fields: dict, means: dict, velocity=VELOCITY) -> np.ndarray:
    """Deterministic ``1/2 sum_r (Y_r - Y_bar_r)^2`` of ``J x T`` fields."""
    return 0.5 * sum((np.asarray(fields[v]) - np.asarray(means[v])[:, None]) ** 2 for v in velocity)
