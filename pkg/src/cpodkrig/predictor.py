"""Full-field prediction at a new geometry and the spatial/temporal
diagnostics used to judge it.

The predicted field of variable ``r`` is the CPOD expansion with kriged
coefficients,

    Y_hat(x, t) = sum_k beta_hat_k(t; c_new) * M_new{phi_k}(x),

and its pointwise variance uses only the diagonal of the predictive
coefficient covariance,

    V(x, t) = sum_k s_t * T_kk * M_new{phi_k}(x)**2.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .cokrige import DesignScaler, GpModelSlice, predict_many
from .cpod import CpodBasis
from .errors import ParameterError, UndefinedMetricError, ValidationError
from .grid import GeometryParams, as_points


@dataclass
class PredictedField:
    """Predicted mean and variance, each a ``J x T`` array per variable."""

    geometry: GeometryParams
    points: np.ndarray
    mean: dict
    variance: dict | None = None

    @property
    def T(self) -> int:
        return next(iter(self.mean.values())).shape[1]


def _check_models(basis: CpodBasis, models) -> list:
    models = list(models)
    if not models:
        raise ValidationError("no fitted models supplied")
    for t, m in enumerate(models):
        if not isinstance(m, GpModelSlice):
            raise ValidationError(f"time step {t} holds no fitted model")
        if m.K != basis.K:
            raise ValidationError(f"model at time step {t} has K={m.K}, basis has K={basis.K}")
    return models


def scaled_design(c_new, models, scaler: DesignScaler | None = None) -> np.ndarray:
    """Unit-cube design vector of a geometry (arrays pass through unchanged)."""
    p = models[0].designs.shape[1]
    if isinstance(c_new, GeometryParams):
        scaler = DesignScaler.from_table() if scaler is None else scaler
        if len(scaler.names) != p:
            raise ParameterError(f"models use {p} design variables but the scaler has {len(scaler.names)}")
        c = scaler.geometry_vector(c_new)
    else:
        c = np.asarray(c_new, dtype=float).ravel()
    if c.size != p:
        raise ParameterError(f"design vector has {c.size} entries, models expect {p}")
    return c


def warn_if_extrapolating(c: np.ndarray, designs: np.ndarray) -> bool:
    """Warn when ``c`` lies outside the convex hull of the training designs."""
    inside = bool(np.all(c >= designs.min(axis=0) - 1e-12) and np.all(c <= designs.max(axis=0) + 1e-12))
    if inside and designs.shape[0] > designs.shape[1] >= 2:
        from scipy.spatial import Delaunay, QhullError
        try:
            inside = bool(Delaunay(designs).find_simplex(c[None])[0] >= 0)
        except QhullError:
            pass
    if not inside:
        warnings.warn(f"design point {c} lies outside the training design hull; extrapolating",
                      RuntimeWarning, stacklevel=3)
    return not inside


def predicted_coefficients(models, c: np.ndarray):
    """Kriged coefficients ``(T, K)`` and variance factors ``(T,)``."""
    out = [predict_many(m, c[None]) for m in models]
    return np.vstack([o[0] for o in out]), np.array([o[1][0] for o in out])


def predict_flow(basis: CpodBasis, models, c_new: GeometryParams, target_grid,
                 scaler: DesignScaler | None = None, variables=None, with_variance: bool = True
                 ) -> PredictedField:
    """Predict every variable on ``target_grid`` of geometry ``c_new``."""
    models = _check_models(basis, models)
    pts = as_points(target_grid)
    geom = c_new.with_extent(pts)
    c = scaled_design(c_new, models, scaler)
    warn_if_extrapolating(c, models[0].designs)
    beta, s = predicted_coefficients(models, c)
    stencil = basis.transfer(geom, pts)
    variables = basis.variables if variables is None else list(variables)
    blocks = basis.blocks
    mean, var = {}, {}
    for v in variables:
        if v not in blocks:
            raise ValidationError(f"variable {v!r} is not in the basis")
        phi = basis.mapped_modes(v, geom, pts, stencil)
        blk = blocks[v]
        mean[v] = phi @ beta[:, blk].T + basis.mapped_mean(v, geom, pts, stencil)[:, None]
        if with_variance:
            tdiag = np.array([np.diag(m.T_cov)[blk] for m in models])  # (T, K_r)
            var[v] = np.clip((phi**2) @ (s[:, None] * tdiag).T, 0.0, None)
    return PredictedField(geom, pts, mean, var if with_variance else None)


def flow_variance(basis: CpodBasis, models, c_new: GeometryParams, target_grid,
                  scaler: DesignScaler | None = None) -> dict:
    return predict_flow(basis, models, c_new, target_grid, scaler).variance


def mre(sim, pred, region=None) -> np.ndarray:
    """Mean relative error in percent, one value per time step.

    ``sim`` and ``pred`` are ``(J,)`` or ``(J, T)``; ``region`` is a boolean
    point mask (default all points).
    """
    sim = np.asarray(sim, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if sim.shape != pred.shape:
        raise ValidationError(f"shape mismatch {sim.shape} vs {pred.shape}")
    if sim.ndim == 1:
        sim, pred = sim[:, None], pred[:, None]
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if not region.any():
            raise ValidationError("MRE region is empty")
        sim, pred = sim[region], pred[region]
    den = np.abs(sim).sum(axis=0)
    if np.any(den == 0):
        bad = np.flatnonzero(den == 0).tolist()
        raise UndefinedMetricError(f"MRE undefined at time steps {bad}: reference field is zero")
    return np.abs(sim - pred).sum(axis=0) / den * 100.0


def psd_probe(series, dt: float, window: str | None = None):
    """One-sided periodogram of a mean-removed probe series.

    Normalized so that ``sum(power) * df`` equals the (population) variance
    of the series; with ``window="hann"`` the tapered series is rescaled by
    its mean-square window weight.

    Returns
    -------
    freqs : (T // 2 + 1,) array, spacing ``1 / (T dt)``
    power : array of the same shape
    """
    x = np.asarray(series, dtype=float).ravel()
    T = x.size
    if T < 8:
        raise ValidationError(f"PSD needs at least 8 samples, got {T}")
    if not dt > 0:
        raise ParameterError("dt must be positive")
    x = x - x.mean()
    if window is None:
        w = np.ones(T)
    elif window == "hann":
        w = np.hanning(T)
    else:
        raise ParameterError(f"unknown window {window!r}")
    X = np.fft.rfft(x * w)
    df = 1.0 / (T * dt)
    power = np.abs(X) ** 2 / (T**2 * df) / np.mean(w**2)
    power[1:] *= 2.0
    if T % 2 == 0:
        power[-1] /= 2.0
    return np.fft.rfftfreq(T, dt), power


def psd_peaks(freqs, power, count: int = 3) -> list:
    """The ``count`` largest non-DC spectral bins as ``(freq, power)`` pairs."""
    order = np.argsort(power[1:])[::-1][:count] + 1
    return [(float(freqs[i]), float(power[i])) for i in order]


def time_means(field, window=None) -> np.ndarray:
    """Time average of a ``J x T`` field over the steps in ``window``
    (a slice, index array or ``(start, stop)`` pair; default all steps)."""
    field = np.asarray(field, dtype=float)
    if window is None:
        return field.mean(axis=1)
    if isinstance(window, tuple) and len(window) == 2:
        window = slice(*window)
    sub = field[:, window]
    if sub.shape[1] == 0:
        raise ValidationError("time-mean window is empty")
    return sub.mean(axis=1)
