import numpy as np
import pytest
from scipy import stats

from cpodkrig.cokrige import (DesignScaler, GpModelSlice, chi2_quantile, correlation,
                              correlation_matrix, factor_correlation, hdcr_contains,
                              predict_coefficients, predict_many, variance_factor)
from cpodkrig.errors import ConditioningError, ParameterError
from tests.conftest import random_spd


def make_model(rng, n=5, K=3, p=2, tau=None):
    X = rng.random((n, p))
    tau = rng.uniform(0.1, 0.9, p) if tau is None else tau
    return GpModelSlice(mu=rng.standard_normal(K), T_cov=random_spd(rng, K), tau=tau,
                        designs=X, B=rng.standard_normal((n, K)))


def dense_conditional(m, c):
    """Condition the joint Gaussian of (vec B, beta_new) explicitly."""
    n, K = m.B.shape
    X = np.vstack([m.designs, c])
    R = correlation_matrix(m.tau, X)
    S = np.kron(R, m.T_cov)  # run-major stacking
    Sxx, Sxy, Syy = S[:n * K, :n * K], S[:n * K, n * K:], S[n * K:, n * K:]
    dev = m.B.reshape(-1) - np.tile(m.mu, n)
    mean = m.mu + Sxy.T @ np.linalg.solve(Sxx, dev)
    cov = Syy - Sxy.T @ np.linalg.solve(Sxx, Sxy)
    return mean, cov


def test_correlation_kernel():
    assert correlation([0.5], [0.0], [0.5]) == pytest.approx(0.5)
    assert correlation([0.3, 0.7], [0.2, 0.2], [0.2, 0.2]) == 1.0
    with pytest.raises(ParameterError):
        correlation([1.0], [0.0], [1.0])


def test_scaler_round_trip():
    s = DesignScaler.from_table(("L", "R_n"))
    raw = np.array([60.0, 3.5])
    assert np.allclose(s.scale(raw), [0.5, 0.5])
    assert np.allclose(s.unscale(s.scale(raw)), raw)
    back = DesignScaler.from_dict(s.to_dict())
    assert back.names == s.names and np.array_equal(back.upper, s.upper)
    with pytest.raises(ParameterError):
        DesignScaler(("a",), np.array([1.0]), np.array([1.0]))


def test_predictor_matches_dense_conditioning(rng):
    for _ in range(20):
        m = make_model(rng, n=4, K=3)
        c = rng.random(2)
        mean, cov = predict_coefficients(m, c)
        dm, dc = dense_conditional(m, c)
        assert np.allclose(mean, dm, atol=1e-10)
        assert np.allclose(cov, dc, atol=1e-10)


def test_interpolates_training_points(rng):
    m = make_model(rng, n=6)
    for i in range(6):
        mean, cov = predict_coefficients(m, m.designs[i])
        assert np.allclose(mean, m.B[i], atol=1e-8)
        assert abs(variance_factor(m, m.designs[i])[0]) <= 1e-8


def test_mean_ignores_cross_covariance(rng):
    m = make_model(rng)
    c = rng.random((3, 2))
    assert np.allclose(predict_many(m, c)[0], predict_many(m.independent(), c)[0])


def test_variance_factor_nonincreasing_with_more_runs(rng):
    X = rng.random((10, 2))
    tau = np.array([0.4, 0.6])
    c = rng.random((20, 2))
    prev = None
    for n in (3, 5, 8, 10):
        m = GpModelSlice(np.zeros(1), np.eye(1), tau, X[:n], np.zeros((n, 1)))
        s = variance_factor(m, c)
        if prev is not None:
            assert np.all(s <= prev + 1e-12)
        prev = s


def test_far_field_is_prior(rng):
    m = make_model(rng, tau=np.array([1e-3, 1e-3]))
    mean, cov = predict_coefficients(m, [50.0, 50.0])
    assert np.allclose(mean, m.mu) and np.allclose(cov, m.T_cov)


def test_singular_designs_name_the_pair():
    X = np.array([[0.1, 0.1], [0.5, 0.5], [0.5, 0.5]])
    R = np.ones((3, 3)) * 2
    with pytest.raises(ConditioningError) as exc:
        factor_correlation(R - np.eye(3) * 3, X)
    assert exc.value.pair == (1, 2)


def test_jitter_only_on_failure(rng):
    R = correlation_matrix([0.5, 0.5], rng.random((5, 2)))
    assert factor_correlation(R)[1] == 0.0
    R = correlation_matrix([0.999, 0.999], np.array([[0.0, 0.0], [1e-4, 0.0], [0.0, 1e-4], [1e-4, 1e-4]]))
    L, eps = factor_correlation(R)
    assert eps > 0


def test_model_validation(rng):
    with pytest.raises(ParameterError, match="positive definite"):
        GpModelSlice(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), [0.5], np.zeros((2, 1)) + [[0], [1]],
                     np.zeros((2, 2)))
    with pytest.raises(ParameterError, match="symmetric"):
        GpModelSlice(np.zeros(2), np.array([[1.0, 0.2], [0.0, 1.0]]), [0.5], [[0.0], [1.0]], np.zeros((2, 2)))


@pytest.mark.parametrize("dof", [1, 2, 5, 30])
def test_chi2_quantile(dof):
    for p in (0.01, 0.5, 0.9, 0.999):
        assert chi2_quantile(p, dof) == pytest.approx(stats.chi2.ppf(p, dof), rel=1e-8)
    assert chi2_quantile(0.0, dof) == 0.0


def test_hdcr(rng):
    m = make_model(rng, n=5, K=2)
    c = np.array([0.35, 0.65])
    mean, cov = predict_coefficients(m, c)
    assert hdcr_contains(m, c, mean, 0.1)
    far = mean + 100 * np.sqrt(np.diag(cov))
    assert not hdcr_contains(m, c, far, 0.1)
    with pytest.raises(ParameterError):
        hdcr_contains(m, c, mean, 1.5)
