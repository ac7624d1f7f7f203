"""Penalized maximum likelihood for one time slice.

The objective is

    l(mu, T, tau) = n log det T + K log det R_tau
                    + tr(T^{-1} E' R_tau^{-1} E) + lam * ||T^{-1}||_1,

with ``E = B - 1 mu'``. It is minimized by blockwise coordinate descent:
a graphical LASSO solve for ``T`` given ``(mu, tau)``, then L-BFGS on
``tau`` with ``mu`` profiled out in closed form.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.special import expit, logit
from scipy.stats import qmc

from .cokrige import GpModelSlice, correlation_matrix, factor_correlation, predict_many
from .errors import ConditioningError, CpodError, ParameterError

logger = logging.getLogger(__name__)

TAU_LO, TAU_HI = 1e-3, 1.0 - 1e-3
# starting points are kept at |z| <= 8 on the logit scale so the chain-rule
# factor of the reparameterization does not vanish
Z_CLIP = 8.0


@dataclass(frozen=True)
class FitConfig:
    lam: float = 0.0
    n_starts: int = 8
    max_bcd_iters: int = 50
    bcd_tol: float = 1e-8
    glasso_tol: float = 1e-8
    lbfgs_tol: float = 1e-6
    lbfgs_memory: int = 10
    seed: int = 0
    enforce_mask: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")
        if self.n_starts < 1:
            raise ParameterError("n_starts must be >= 1")
        if self.max_bcd_iters < 1:
            raise ParameterError("max_bcd_iters must be >= 1")
        for name in ("bcd_tol", "glasso_tol", "lbfgs_tol"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0")
        if self.lbfgs_memory < 1:
            raise ParameterError("lbfgs_memory must be >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class FitReport:
    final_nll: float
    trace: list
    converged: bool
    start_index: int
    glasso_sweeps: int = 0
    lbfgs_iters: int = 0
    start_nlls: list = field(default_factory=list)
    failed_starts: list = field(default_factory=list)


def _chol(tau, designs):
    return factor_correlation(correlation_matrix(tau, designs), designs)[0]


def _logdet_chol(L) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def _precision_and_logdet(T_cov, precision=None):
    L = np.linalg.cholesky(T_cov)
    logdet = _logdet_chol(L)
    if precision is None:
        Li = np.linalg.inv(L)
        precision = Li.T @ Li
    return precision, logdet


def penalized_nll(mu, T_cov, tau, B, designs, lam: float = 0.0, precision=None) -> float:
    """Penalized negative log-likelihood of one slice.

    Evaluated from Cholesky factors; the Kronecker covariance is never
    formed. ``precision`` may carry the exact (sparse) inverse of ``T_cov``.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, K = B.shape
    T_cov = np.atleast_2d(T_cov)
    try:
        Theta, logdet_T = _precision_and_logdet(T_cov, precision)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("T_cov is not positive definite") from exc
    L = _chol(tau, designs)
    E = B - np.asarray(mu, dtype=float)
    RiE = cho_solve((L, True), E, check_finite=False)
    quad = float(np.sum(Theta * (E.T @ RiE)))
    return n * logdet_T + K * _logdet_chol(L) + quad + lam * float(np.abs(Theta).sum())


def profile_mu(tau, B, designs) -> np.ndarray:
    """Generalized least-squares mean ``(1'R^{-1}1)^{-1} 1'R^{-1}B``."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    L = _chol(tau, designs)
    Ri1 = cho_solve((L, True), np.ones(B.shape[0]), check_finite=False)
    return (Ri1 @ B) / Ri1.sum()


def glasso_kkt(S, Theta, lam, mask=None) -> float:
    """Largest violation of the graphical LASSO optimality conditions.

    Entries forbidden by ``mask`` carry no condition.
    """
    S = np.asarray(S, dtype=float)
    K = S.shape[0]
    allowed = np.ones((K, K), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    G = S - np.linalg.inv(Theta)
    nz = Theta != 0
    viol = np.where(nz, np.abs(G + lam * np.sign(Theta)), np.maximum(np.abs(G) - lam, 0.0))
    viol[~allowed] = 0.0
    return float(viol.max()) if K else 0.0


def _lasso_subproblem(W11, s12, p, b, tol: float, max_passes: int = 1000):
    """Solve ``min_b 0.5 b'W11 b - b's12 + sum_k p_k |b_k|``.

    Coordinate descent identifies the support and signs; after each pass the
    subproblem is solved exactly on that support and accepted when the
    signs and the inactive-coordinate conditions hold.
    """
    m = b.size
    free = np.isfinite(p)
    b[~free] = 0.0
    diag = np.diag(W11)
    for _ in range(max_passes):
        delta = 0.0
        for k in np.flatnonzero(free):
            r = s12[k] - W11[k] @ b + diag[k] * b[k]
            new = math.copysign(max(abs(r) - p[k], 0.0), r) / diag[k]
            delta = max(delta, abs(new - b[k]))
            b[k] = new
        if delta <= 1e-3 * tol * max(1.0, float(np.abs(b).max(initial=0.0))):
            return b
        act = np.flatnonzero(b != 0)
        if act.size == 0:
            continue
        sgn = np.sign(b[act])
        try:
            cand_act = np.linalg.solve(W11[np.ix_(act, act)], s12[act] - p[act] * sgn)
        except np.linalg.LinAlgError:
            continue
        if np.any(np.sign(cand_act) != sgn):
            continue
        cand = np.zeros(m)
        cand[act] = cand_act
        inactive = free.copy()
        inactive[act] = False
        grad = s12[inactive] - W11[inactive] @ cand
        if np.all(np.abs(grad) <= p[inactive] * (1 + 1e-12) + 1e-14 * max(1.0, float(np.abs(s12).max()))):
            return cand
    return b


def glasso_block(S, lam: float, mask=None, tol: float = 1e-8, max_sweeps: int = 500):
    """Graphical LASSO by column-wise coordinate descent.

    Solves ``min_Theta -log det Theta + tr(S Theta) + lam ||Theta||_1`` with
    entries outside ``mask`` held at zero. Sweeps stop once the KKT residual
    is below ``tol * max(1, max|S|)``. The covariance iterate starts at
    ``W = S + lam I``; each column update solves the LASSO subproblem
    ``min_b 0.5 b'W11 b - b's12 + lam ||b||_1`` and sets ``w12 = W11 b``.

    Returns
    -------
    T_cov : ndarray
        Inverse of the returned precision.
    precision : ndarray
        Sparse precision estimate.
    sweeps : int
    """
    S = np.asarray(S, dtype=float)
    K = S.shape[0]
    if S.shape != (K, K) or np.abs(S - S.T).max(initial=0.0) > 1e-10 * max(np.abs(S).max(initial=0.0), 1.0):
        raise ParameterError("S must be a symmetric square matrix")
    if lam < 0:
        raise ParameterError(f"penalty must be >= 0, got {lam}")
    S = 0.5 * (S + S.T)
    if K and np.linalg.eigvalsh(S).min() < -1e-10 * max(np.abs(S).max(), 1e-300):
        raise ParameterError("S is not positive semidefinite")
    allowed = np.ones((K, K), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if lam == 0 and allowed.all():
        try:
            Theta = np.linalg.inv(S)
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise ConditioningError("unpenalized problem needs S positive definite") from exc
        return S.copy(), 0.5 * (Theta + Theta.T), 0

    # the stopping test is relative once entries of S exceed one
    scale = max(1.0, float(np.abs(S).max(initial=0.0)))
    pen = np.where(allowed, lam, np.inf)
    W = S + lam * np.eye(K)
    coef = np.zeros((K, K))
    Theta = np.diag(1.0 / np.diag(W))
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        for j in range(K):
            rest = np.arange(K) != j
            W11 = W[np.ix_(rest, rest)]
            s12 = S[rest, j]
            p = pen[rest, j]
            b = _lasso_subproblem(W11, s12, p, coef[rest, j].copy(), tol)
            coef[rest, j] = b
            w12 = W11 @ b
            W[rest, j] = w12
            W[j, rest] = w12
        Theta = _precision_from(W, coef)
        try:
            if glasso_kkt(S, Theta, lam, allowed) <= tol * scale:
                break
        except np.linalg.LinAlgError:
            continue
    T_cov = np.linalg.inv(Theta)
    return 0.5 * (T_cov + T_cov.T), Theta, sweeps


def _precision_from(W, coef):
    K = W.shape[0]
    Theta = np.zeros((K, K))
    for j in range(K):
        rest = np.arange(K) != j
        b = coef[rest, j]
        tjj = 1.0 / (W[j, j] - W[rest, j] @ b)
        Theta[j, j] = tjj
        Theta[rest, j] = -b * tjj
    sym = 0.5 * (Theta + Theta.T)
    sym[(Theta == 0) | (Theta.T == 0)] = 0.0
    return sym


def _whitened_cov(mu, tau, B, designs):
    # Gram matrix of L^{-1} E, symmetric and PSD even when R is ill-conditioned
    L = _chol(tau, designs)
    Z = solve_triangular(L, B - mu, lower=True, check_finite=False)
    return Z.T @ Z / B.shape[0]


def _profiled(z, Theta, logdet_T, B, designs, lam_term, span, d2):
    """Profiled objective in logit coordinates and its gradient."""
    s = expit(z)
    tau = TAU_LO + span * s
    n, K = B.shape
    R = correlation_matrix(tau, designs)
    try:
        L, eps = factor_correlation(R, designs)
    except ConditioningError:
        return np.inf, np.zeros_like(z)
    Ri = cho_solve((L, True), np.eye(n), check_finite=False)
    Ri1 = Ri.sum(axis=1)
    mu = (Ri1 @ B) / Ri1.sum()
    E = B - mu
    RiE = Ri @ E
    quad = float(np.sum(Theta * (E.T @ RiE)))
    f = n * logdet_T + K * _logdet_chol(L) + quad + lam_term
    A = RiE @ Theta @ RiE.T
    # d R_ab / d tau_j = R_ab * 4 d2_abj / tau_j
    g_tau = 4.0 * np.einsum("ab,abj->j", (K * Ri - A) * R, d2) / tau
    return f, g_tau * span * s * (1.0 - s)


def lbfgs_tau_block(T_cov, B, designs, tau0, lam: float = 0.0, precision=None,
                    tol: float = 1e-6, memory: int = 10, max_iter: int = 200):
    """Minimize the mu-profiled objective over ``tau`` with ``T`` fixed.

    ``tau`` is parameterized as ``1e-3 + (1 - 2e-3) * expit(z)``.

    Returns
    -------
    tau : ndarray
    info : dict with ``converged``, ``nit``, ``nll`` and ``grad_inf``
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    designs = np.atleast_2d(np.asarray(designs, dtype=float))
    Theta, logdet_T = _precision_and_logdet(np.atleast_2d(T_cov), precision)
    lam_term = lam * float(np.abs(Theta).sum())
    span = TAU_HI - TAU_LO
    tau0 = np.clip(np.asarray(tau0, dtype=float), TAU_LO, TAU_HI)
    z0 = np.clip(logit(np.clip((tau0 - TAU_LO) / span, 1e-300, 1 - 1e-16)), -Z_CLIP, Z_CLIP)
    d2 = (designs[:, None, :] - designs[None, :, :]) ** 2
    args = (Theta, logdet_T, B, designs, lam_term, span, d2)
    f0, g0 = _profiled(z0, *args)
    if not np.isfinite(f0):
        raise ConditioningError("correlation matrix at the starting tau cannot be factored")
    if np.abs(g0).max() <= tol:
        return TAU_LO + span * expit(z0), {"converged": True, "nit": 0, "nll": f0,
                                           "grad_inf": float(np.abs(g0).max())}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(_profiled, z0, args=args, jac=True, method="L-BFGS-B",
                       options={"maxcor": memory, "gtol": tol, "ftol": 1e-15, "maxiter": max_iter})
    z, f = res.x, float(res.fun)
    if not np.isfinite(f) or f > f0:
        z, f = z0, f0
    _, g = _profiled(z, *args)
    gi = float(np.abs(g).max())
    return TAU_LO + span * expit(z), {"converged": bool(gi <= tol), "nit": int(res.nit),
                                      "nll": f, "grad_inf": gi}


def start_points(p: int, n_starts: int, seed: int = 0) -> np.ndarray:
    """The default start ``(1 - 1e-3) 1_p`` followed by scrambled Halton points
    on ``[1e-3, 1 - 1e-3]^p``."""
    first = np.full((1, p), TAU_HI)
    if n_starts == 1:
        return first
    pts = qmc.Halton(d=p, scramble=True, seed=seed).random(n_starts - 1)
    return np.vstack([first, TAU_LO + (TAU_HI - TAU_LO) * pts])


def _single_fit(B, designs, cfg: FitConfig, mask, mu, T_cov, Theta, tau, replicas: int = 1):
    # with replicas > 1 the columns of B hold that many slices side by side,
    # all sharing one K x K covariance (tied block-diagonally) and one tau
    n = B.shape[0]
    K = B.shape[1] // replicas
    rho = cfg.lam / n
    tie = (lambda X: X) if replicas == 1 else (lambda X: np.kron(np.eye(replicas), X))
    nll = penalized_nll(mu, tie(T_cov), tau, B, designs, cfg.lam, tie(Theta))
    trace = [nll]
    sweeps = iters = 0
    converged = False
    for _ in range(cfg.max_bcd_iters):
        prev = nll
        # T block
        S = _whitened_cov(mu, tau, B, designs)
        if replicas > 1:
            S = sum(S[i * K:(i + 1) * K, i * K:(i + 1) * K] for i in range(replicas)) / replicas
        T_new, Th_new, sw = glasso_block(S, rho, mask, tol=cfg.glasso_tol)
        sweeps += sw
        cand = penalized_nll(mu, tie(T_new), tau, B, designs, cfg.lam, tie(Th_new))
        if cand <= nll:
            T_cov, Theta, nll = T_new, Th_new, cand
        # (mu, tau) block
        try:
            tau_new, info = lbfgs_tau_block(tie(T_cov), B, designs, tau, cfg.lam, tie(Theta),
                                            tol=cfg.lbfgs_tol, memory=cfg.lbfgs_memory)
        except ConditioningError:
            tau_new, info = tau, {"nit": 0}
        iters += info["nit"]
        mu_new = profile_mu(tau_new, B, designs)
        cand = penalized_nll(mu_new, tie(T_cov), tau_new, B, designs, cfg.lam, tie(Theta))
        if cand <= nll:
            mu, tau, nll = mu_new, tau_new, cand
        trace.append(nll)
        if prev - nll <= cfg.bcd_tol * max(1.0, abs(nll)):
            converged = True
            break
    return mu, T_cov, Theta, tau, trace, converged, sweeps, iters


def _check_data(B, designs):
    B = np.atleast_2d(np.asarray(B, dtype=float))
    designs = np.atleast_2d(np.asarray(designs, dtype=float))
    n = B.shape[0]
    if n < 2:
        raise ParameterError("n >= 2 required")
    if designs.shape[0] != n:
        raise ParameterError(f"{designs.shape[0]} design points for {n} runs")
    if not np.all(np.isfinite(B)):
        raise ParameterError("coefficients must be finite")
    return B, designs


def _best_of_starts(B, designs, config, mask, starts, replicas=1):
    best = None
    report = FitReport(np.inf, [], False, -1)
    for s, (mu0, T0, Th0, tau0) in enumerate(starts):
        tau0 = np.clip(tau0, TAU_LO, TAU_HI)
        try:
            out = _single_fit(B, designs, config, mask, mu0, T0, Th0, tau0, replicas)
        except CpodError as exc:
            logger.debug("start %d failed: %s", s, exc)
            report.failed_starts.append(s)
            report.start_nlls.append(np.inf)
            continue
        trace = out[4]
        report.start_nlls.append(trace[-1])
        report.glasso_sweeps += out[6]
        report.lbfgs_iters += out[7]
        if best is None or trace[-1] < best[4][-1]:
            best = out
            report.start_index = s
    if best is None:
        raise ConditioningError("every start failed to factor the correlation matrix")
    report.final_nll = best[4][-1]
    report.trace = best[4]
    report.converged = best[5]
    return best[:4], report


def bcd_fit(B, designs, config: FitConfig = FitConfig(), mask=None, init=None):
    """Fit one slice by blockwise coordinate descent with multiple starts.

    Parameters
    ----------
    B : (n, K) array of coefficients, one row per run.
    designs : (n, p) array of design points scaled to ``[0, 1]``.
    mask : (K, K) bool array, optional
        Precision entries allowed to be nonzero.
    init : tuple (mu, T_cov, precision, tau), optional
        Warm start replacing the default starting set.

    Returns
    -------
    model : GpModelSlice
    report : FitReport
    """
    B, designs = _check_data(B, designs)
    K = B.shape[1]
    if mask is not None and not config.enforce_mask:
        mask = None
    if init is not None:
        starts = [tuple(np.array(a, dtype=float) for a in init)]
    else:
        starts = [(np.zeros(K), np.eye(K), np.eye(K), t0)
                  for t0 in start_points(designs.shape[1], config.n_starts, config.seed)]
    (mu, T_cov, Theta, tau), report = _best_of_starts(B, designs, config, mask, starts)
    model = GpModelSlice(mu=mu, T_cov=T_cov, tau=tau, designs=designs, B=B,
                         precision=Theta, lam=config.lam, nll=report.final_nll)
    return model, report


def fit_pooled(coeffs, designs, config: FitConfig = FitConfig(), mask=None, window=None):
    """One ``(T, tau)`` shared by several time steps, each with its own mean.

    The slices in ``window`` (a slice, index array or ``(start, stop)``
    pair; default all) are independent replicates with a common correlation
    matrix, so the objective is the sum of their penalized likelihoods.

    Returns
    -------
    model : GpModelSlice
        Summary slice holding the shared ``T_cov``, precision and ``tau``,
        with ``mu`` and ``B`` averaged over the window. Meant for coupling
        analysis rather than prediction.
    report : FitReport
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.ndim != 3:
        raise ParameterError(f"coefficients must be (T, n, K), got shape {coeffs.shape}")
    if isinstance(window, tuple) and len(window) == 2:
        window = slice(*window)
    sub = coeffs if window is None else coeffs[window]
    if sub.ndim != 3 or sub.shape[0] == 0:
        raise ParameterError("pooling window holds no time steps")
    m, _, K = sub.shape
    B, designs = _check_data(np.hstack(list(sub)), designs)
    if mask is not None and not config.enforce_mask:
        mask = None
    starts = [(np.zeros(m * K), np.eye(K), np.eye(K), t0)
              for t0 in start_points(designs.shape[1], config.n_starts, config.seed)]
    (mu, T_cov, Theta, tau), report = _best_of_starts(B, designs, config, mask, starts, replicas=m)
    model = GpModelSlice(mu=mu.reshape(m, K).mean(axis=0), T_cov=T_cov, tau=tau, designs=designs,
                         B=sub.mean(axis=0), precision=Theta, lam=config.lam, nll=report.final_nll)
    return model, report


def edge_count(precision, mask=None) -> int:
    """Number of nonzero allowed off-diagonal precision entries (i < j)."""
    P = np.asarray(precision)
    K = P.shape[0]
    iu = np.triu_indices(K, 1)
    ok = np.ones(len(iu[0]), dtype=bool) if mask is None else np.asarray(mask)[iu]
    return int(np.count_nonzero(P[iu][ok]))


def max_edges(mask, K: int) -> int:
    if mask is None:
        return K * (K - 1) // 2
    return int(np.count_nonzero(np.triu(np.asarray(mask, dtype=bool), 1)))


@dataclass
class TopKResult:
    lam: float
    edges: int
    model: GpModelSlice
    report: FitReport


def select_top_k(B, designs, k: int, config: FitConfig = FitConfig(), mask=None,
                 rtol: float = 1e-6, max_steps: int = 60) -> TopKResult:
    """Smallest penalty whose fitted precision keeps at most ``k`` edges.

    The edge count is bracketed between a penalty with too many edges and
    one with at most ``k``, then the bracket is bisected. If the count jumps
    over ``k`` the nearest achievable count is returned.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, K = B.shape
    limit = max_edges(mask, K)
    if k < 0 or k > limit:
        raise ParameterError(f"k={k} edges requested but only {limit} are allowed")

    base, base_rep = bcd_fit(B, designs, replace(config, lam=0.0), mask)
    if edge_count(base.precision, mask) <= k:
        return TopKResult(0.0, edge_count(base.precision, mask), base, base_rep)

    def fit(lam, warm):
        init = (warm.mu, warm.T_cov, warm.precision, warm.tau)
        m, rep = bcd_fit(B, designs, replace(config, lam=lam), mask, init=init)
        return m, rep

    S = _whitened_cov(base.mu, base.tau, B, designs)
    allowed = np.ones((K, K), bool) if mask is None else np.asarray(mask, bool)
    off = np.abs(S)[np.triu(allowed, 1)]
    hi = n * float(off.max()) * 1.01
    hi_fit = fit(hi, base)
    while edge_count(hi_fit[0].precision, mask) > k:
        hi *= 2.0
        hi_fit = fit(hi, hi_fit[0])
    lo, lo_fit = 0.0, (base, base_rep)
    for _ in range(max_steps):
        if hi - lo <= rtol * hi:
            break
        mid = 0.5 * (lo + hi)
        mfit = fit(mid, hi_fit[0])
        if edge_count(mfit[0].precision, mask) <= k:
            hi, hi_fit = mid, mfit
        else:
            lo, lo_fit = mid, mfit
    c_hi = edge_count(hi_fit[0].precision, mask)
    c_lo = edge_count(lo_fit[0].precision, mask)
    if c_hi != k and abs(c_lo - k) < abs(c_hi - k):
        logger.warning("edge count jumps over k=%d; returning nearest achievable %d", k, c_lo)
        return TopKResult(lo, c_lo, *lo_fit)
    if c_hi != k:
        logger.warning("edge count jumps over k=%d; returning nearest achievable %d", k, c_hi)
    return TopKResult(hi, c_hi, *hi_fit)


def cv_errors(B, designs, lams, folds: int, config: FitConfig = FitConfig(), mask=None, seed: int = 0):
    """Held-out squared prediction error per penalty and per fold.

    ``B`` is ``(n, K)`` or ``(T, n, K)``; folds partition the runs and a
    run's coefficients at every time step stay in the same fold.
    """
    B = np.asarray(B, dtype=float)
    if B.ndim == 2:
        B = B[None]
    _, n, _ = B.shape
    if not 2 <= folds <= n:
        raise ParameterError(f"need 2 <= folds <= n={n}, got {folds}")
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(perm, folds)
    err = np.zeros((len(lams), folds))
    for a, lam in enumerate(lams):
        cfg = replace(config, lam=float(lam))
        for f, test in enumerate(parts):
            train = np.setdiff1d(np.arange(n), test)
            for Bt in B:
                model, _ = bcd_fit(Bt[train], designs[train], cfg, mask)
                means, _ = predict_many(model, designs[test])
                err[a, f] += float(np.sum((means - Bt[test]) ** 2))
    return err


def lambda_grid(B, designs, num: int = 10, config: FitConfig = FitConfig(), mask=None) -> np.ndarray:
    """Log-spaced penalties from 1e-3 of the saturation level up to it."""
    B = np.asarray(B, dtype=float)
    Bt = B if B.ndim == 2 else B[0]
    base, _ = bcd_fit(Bt, designs, replace(config, lam=0.0, n_starts=1), mask)
    S = _whitened_cov(base.mu, base.tau, Bt, designs)
    K = S.shape[0]
    allowed = np.ones((K, K), bool) if mask is None else np.asarray(mask, bool)
    off = np.abs(S)[np.triu(allowed, 1)]
    top = Bt.shape[0] * float(off.max()) if off.size else 1.0
    return top * np.logspace(-3, 0, num)


def tune_lambda(B, designs, mode: str = "cross_validate", folds: int = 5, k: int = 9,
                config: FitConfig = FitConfig(), mask=None, grid=None, one_se: bool = False) -> float:
    """Choose the sparsity penalty.

    ``mode="cross_validate"`` scans a log grid and returns the penalty
    minimizing the cross-validated error (``one_se=True`` instead returns the
    largest penalty within one standard error of the minimum).
    ``mode="top_k_edges"`` returns the penalty found by :func:`select_top_k`.
    """
    if mode == "top_k_edges":
        B = np.asarray(B, dtype=float)
        if B.ndim != 2:
            raise ParameterError("top_k_edges tunes one slice at a time")
        return select_top_k(B, designs, k, config, mask).lam
    if mode != "cross_validate":
        raise ParameterError(f"unknown tuning mode {mode!r}")
    grid = lambda_grid(B, designs, config=config, mask=mask) if grid is None else np.asarray(grid)
    err = cv_errors(B, designs, grid, folds, config, mask, seed=config.seed)
    return float(grid[pick_lambda(err, one_se)])


def pick_lambda(err, one_se: bool = False) -> int:
    """Index of the chosen penalty given a ``(grid, folds)`` error table
    ordered by increasing penalty."""
    total = err.sum(axis=1)
    best = int(np.argmin(total))
    if not one_se:
        return best
    folds = err.shape[1]
    se = np.std(err[best], ddof=1) * np.sqrt(folds) if folds > 1 else 0.0
    ok = np.flatnonzero(total <= total[best] + se)
    return int(ok.max())


def fit_slices(coeffs, designs, config: FitConfig = FitConfig(), mask=None, top_k: int | None = None,
               threads: int = 1):
    """Fit every time slice independently.

    ``coeffs`` is ``(T, n, K)``. With ``top_k`` set, each slice gets its own
    penalty so that exactly ``top_k`` couplings survive (when achievable).
    Returns a list of ``(model, report)``.
    """
    coeffs = np.asarray(coeffs, dtype=float)

    def one(Bt):
        if top_k is not None:
            res = select_top_k(Bt, designs, top_k, config, mask)
            return res.model, res.report
        return bcd_fit(Bt, designs, config, mask)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(one, coeffs))
    return [one(Bt) for Bt in coeffs]
