import numpy as np
import pytest
from scipy.linalg import subspace_angles

from cpodkrig.cpod import extract_basis
from cpodkrig.errors import ParameterError
from cpodkrig.synthgen import (GridShape, SyntheticSpec, coupled_precision, draw_coefficients,
                               generate, reference_spec, space_filling_design)


def test_latin_hypercube_strata():
    X = space_filling_design(3, 30, seed=1)
    assert X.shape == (30, 3)
    for j in range(3):
        assert sorted(np.floor(X[:, j] * 30).astype(int).tolist()) == list(range(30))
    one = space_filling_design(2, 1, seed=0)
    assert one.shape == (1, 2) and np.all((one > 0) & (one < 1))
    with pytest.raises(ParameterError):
        space_filling_design(2, 0)


def test_reference_spec_layout():
    spec = reference_spec()
    assert spec.reference_points().shape == (400, 2) == (GridShape().J, 2)
    assert spec.p == 2 and spec.n_runs == 12 and spec.n_steps == 50


def test_true_modes_orthonormal():
    spec = reference_spec()
    for v, M in spec.true_modes().items():
        assert np.allclose(M.T @ M, np.eye(M.shape[1]), atol=1e-10)


def test_true_precision_respects_mask():
    spec = reference_spec()
    P = np.linalg.inv(spec.T_cov)
    assert abs(P[0, 1]) < 1e-12 and abs(P[2, 3]) < 1e-12


def test_cpod_spans_true_modes():
    spec = reference_spec(seed=5, n_runs=5, n_steps=6)
    runs, _ = generate(spec)
    basis, _ = extract_basis(runs, energy_target=1.0)
    for v, M in spec.true_modes().items():
        assert basis.K_r[v] == M.shape[1]
        assert subspace_angles(basis.modes[v], M).max() <= 1e-6


def test_single_design_constant_coefficient():
    spec = SyntheticSpec(["u"], [1], np.array([2.0]), np.array([[1e-30]]), np.array([0.5, 0.5]),
                         n_steps=5, designs=np.array([[0.3, 0.7]]))
    runs, _ = generate(spec)
    Y = runs[0].fields["u"]
    assert np.allclose(Y, Y[:, :1], rtol=0, atol=1e-12)


def test_seed_contract():
    a = reference_spec(seed=1, n_runs=4, n_steps=3)
    b = reference_spec(seed=2, n_runs=4, n_steps=3)
    b.designs = a.designs
    ca, cb = draw_coefficients(a), draw_coefficients(b)
    assert not np.allclose(ca, cb)
    for v in a.variables:
        assert np.array_equal(a.true_modes()[v], b.true_modes()[v])
    ra, _ = generate(a)
    ra2, _ = generate(reference_spec(seed=1, n_runs=4, n_steps=3))
    assert all(np.array_equal(x.fields["u"], y.fields["u"]) for x, y in zip(ra, ra2))


def test_sample_covariance_converges():
    T = np.linalg.inv(coupled_precision(3, strong=((0, 1, 0.5),)))
    errs = []
    for n in (10, 40, 160):
        e = []
        for seed in range(8):
            spec = SyntheticSpec(["a", "b", "c"], [1, 1, 1], np.zeros(3), T, np.array([1e-3, 1e-3]),
                                 n_steps=1, n_runs=n, seed=seed)
            B = draw_coefficients(spec)[0]
            e.append(np.linalg.norm(B.T @ B / n - T) / np.linalg.norm(T))
        errs.append(np.mean(e))
    assert errs[0] > errs[1] > errs[2]


def test_spec_validation_and_round_trip(tmp_path):
    with pytest.raises(ParameterError, match="positive definite"):
        SyntheticSpec(["u"], [2], np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), np.array([0.5, 0.5]), 2)
    with pytest.raises(ParameterError):
        coupled_precision(2, strong=((0, 1, 1.5),))
    spec = reference_spec(n_runs=5, n_steps=2)
    spec.save(tmp_path / "s.json")
    back = SyntheticSpec.load(tmp_path / "s.json")
    assert np.array_equal(back.designs, spec.designs) and np.array_equal(back.T_cov, spec.T_cov)


def test_noise_and_archives(tmp_path):
    spec = reference_spec(n_runs=3, n_steps=2)
    spec.noise = 0.1
    runs, coeffs = generate(spec, out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["run000", "run001", "run002"]
    M = spec.true_modes()["u"]
    resid = runs[0].fields["u"] - M @ coeffs[:, 0, :2].T
    assert 0.05 < resid.std() < 0.15
