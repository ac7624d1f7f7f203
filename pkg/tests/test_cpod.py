import warnings

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from cpodkrig.archive import SnapshotEnsemble
from cpodkrig.cpod import (energy_ratio, extract_basis, inner_product_matrix, leading_eigenpairs,
                           pod_from_snapshots, reconstruct)
from cpodkrig.errors import ConvergenceError, DomainError, ValidationError
from cpodkrig.grid import Grid


def random_psd(rng, N, rank=None):
    A = rng.standard_normal((N, rank or N))
    return A @ A.T


def test_inner_product_matrix(rng):
    Y = rng.standard_normal((30, 7))
    Q = inner_product_matrix(Y)
    assert Q[2, 5] == pytest.approx(np.sum(Y[:, 2] * Y[:, 5]))


@pytest.mark.parametrize("N", [60, 200])
def test_lanczos_matches_dense(rng, N):
    Q = random_psd(rng, N)
    vd, Vd = leading_eigenpairs(Q, 5, method="dense")
    vl, Vl = leading_eigenpairs(Q, 5, method="lanczos")
    assert np.allclose(vl, vd, rtol=1e-10)
    assert subspace_angles(Vd, Vl).max() < 1e-6


def test_eigenpairs_sign_convention(rng):
    Q = random_psd(rng, 20)
    _, V = leading_eigenpairs(Q, 4)
    rows = np.argmax(np.abs(V), axis=0)
    assert np.all(V[rows, np.arange(4)] > 0)


def test_eigenpairs_input_checks(rng):
    with pytest.raises(ValidationError):
        leading_eigenpairs(rng.standard_normal((5, 5)), 2)
    with pytest.raises(DomainError):
        leading_eigenpairs(np.eye(4), 5)


def test_lanczos_nonconvergence(rng):
    Q = random_psd(rng, 600)
    with pytest.raises(ConvergenceError) as exc:
        leading_eigenpairs(Q, 5, method="lanczos", maxiter=1)
    assert exc.value.residuals is not None


def test_energy_ratio():
    assert energy_ratio([3.0, 1.0], 1) == 0.75
    with pytest.raises(DomainError):
        energy_ratio([0.0, 0.0], 1)


def test_pod_optimality_against_random_bases(rng):
    Y = rng.standard_normal((80, 6)) @ rng.standard_normal((6, 30)) + 0.01 * rng.standard_normal((80, 30))
    modes, coeffs, vals, total = pod_from_snapshots(Y, 1.0)
    for M in (1, 3):
        P = modes[:, :M]
        sse = np.sum((Y - P @ (P.T @ Y)) ** 2)
        assert sse == pytest.approx(np.sum(vals[M:]), rel=1e-8)
        for _ in range(5):
            Qr, _ = np.linalg.qr(rng.standard_normal((80, M)))
            assert np.sum((Y - Qr @ (Qr.T @ Y)) ** 2) >= sse


def test_truncation_is_monotone_in_target(rng):
    Y = rng.standard_normal((50, 20))
    counts = [pod_from_snapshots(Y, e)[0].shape[1] for e in (0.5, 0.9, 0.99, 1.0)]
    assert counts == sorted(counts)
    assert counts[-1] == 20


def test_zero_variable_keeps_no_modes():
    with pytest.warns(RuntimeWarning, match="identically zero"):
        modes, coeffs, _, _ = pod_from_snapshots(np.zeros((10, 4)), 0.99)
    assert modes.shape == (10, 0)


def test_extract_recovers_true_modes(small_ensemble, small_spec):
    train, _, _ = small_ensemble
    basis, C = extract_basis(train, energy_target=1.0)
    true = small_spec.true_modes()
    for v in small_spec.variables:
        assert basis.K_r[v] == 2
        assert np.allclose(basis.modes[v].T @ basis.modes[v], np.eye(2), atol=1e-10)
        assert subspace_angles(basis.modes[v], true[v]).max() <= 1e-6
    assert C.shape == (4, 8, 4)


def test_reconstruction_of_training_run(small_ensemble):
    train, _, _ = small_ensemble
    basis, C = extract_basis(train, energy_target=1.0)
    for i in (0, 3):
        for v in basis.variables:
            rec = reconstruct(basis, C[:, i], train[i].geometry, train[i].grid, v)
            assert np.allclose(rec, train[i].fields[v], atol=1e-8 * np.abs(train[i].fields[v]).max())


def test_centered_basis_round_trip(small_ensemble):
    train, _, _ = small_ensemble
    basis, C = extract_basis(train, energy_target=1.0, center_snapshots=True)
    assert basis.mean_field is not None
    v = basis.variables[0]
    rec = reconstruct(basis, C[:, 2], train[2].geometry, train[2].grid, v)
    assert np.allclose(rec, train[2].fields[v], atol=1e-8 * np.abs(train[2].fields[v]).max())


def test_mask_blocks(small_ensemble):
    basis, _ = extract_basis(small_ensemble[0], energy_target=1.0)
    m = basis.mask()
    assert m.shape == (4, 4)
    assert not m[0, 1] and not m[2, 3] and m[0, 2] and m[1, 1]


def test_extract_validation(small_ensemble):
    train = small_ensemble[0]
    odd = SnapshotEnsemble(train[1].geometry, train[1].grid, {"u": train[1].fields["u"][:, :2],
                                                             "p": train[1].fields["p"][:, :2]})
    with pytest.raises(ValidationError, match="time steps"):
        extract_basis([train[0], odd])
    with pytest.raises(DomainError):
        extract_basis(train, energy_target=0.0)
