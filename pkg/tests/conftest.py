from __future__ import annotations

import numpy as np
import pytest

from cpodkrig.synthgen import SyntheticSpec, coupled_precision, generate, reference_spec

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_spec():
    return reference_spec(seed=7, n_runs=8, n_steps=4)


@pytest.fixture(scope="session")
def small_ensemble(small_spec):
    runs, coeffs = generate(small_spec, extra_designs=[[0.4, 0.6]])
    return runs[:-1], runs[-1], coeffs


def random_spd(rng, K, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((K, K)))
    return Q @ np.diag(np.linspace(1.0, cond, K)) @ Q.T


def velocity_spec(seed=0, n_runs=16, n_steps=6, rho=0.8):
    """Three velocity variables, one mode each, strongly coupled."""
    C = np.array([[1.0, rho, 0.5 * rho], [rho, 1.0, 0.3], [0.5 * rho, 0.3, 1.0]])
    return SyntheticSpec(variables=["u", "v", "w"], modes_per_variable=[1, 1, 1],
                         mu=np.array([6.0, 4.0, 2.0]), T_cov=C, tau=np.array([0.5, 0.5]),
                         n_steps=n_steps, n_runs=n_runs, seed=seed)
