import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kenkf.ensemble import (Ensemble, Sigma, covariance_cu, covariance_du, discrete_enkf_step,
                            empirical_moments, euler_step, gradient_flow_drift,
                            integrate_gradient_flow, read_ensemble_csv, residual_drift,
                            write_ensemble_csv)
from kenkf.errors import ConfigurationError, UnsupportedOperation
from kenkf.meanfield import stable_epsilon
from kenkf.problem import LinearModel, NoiseModel, NonlinearModel, least_squares
from kenkf.problems import build_linear_elliptic, nonlinear_forward

from conftest import random_linear_problem

SCALAR = LinearModel([[1.0]])
UNIT = NoiseModel([[1.0]])


def complement_residual(U, U0):
    """Norm of the members' components outside the initial affine span."""
    base = U0.mean(axis=0)
    Q, _ = np.linalg.qr((U0 - base).T)
    X = U - base
    return np.linalg.norm(X - (X @ Q) @ Q.T)


def test_ensemble_validation():
    with pytest.raises(ConfigurationError):
        Ensemble([[1.0, 2.0]])
    with pytest.raises(ConfigurationError):
        Ensemble(np.zeros((2, 2, 2)))
    ens = Ensemble([0.0, 2.0])
    assert (ens.J, ens.d) == (2, 1)
    with pytest.raises(ValueError):
        ens.members[0, 0] = 5.0


def test_empirical_moments_examples():
    mom = empirical_moments(Ensemble([[0.0], [2.0]]))
    assert np.allclose(mom.m, [1.0]) and np.allclose(mom.E, [[2.0]])
    mom = empirical_moments(Ensemble([[1.0, 0.0], [-1.0, 0.0]]))
    assert np.allclose(mom.m, 0) and np.allclose(mom.E, np.diag([1.0, 0.0]))
    c = np.array([1.5, -2.0, 0.25])
    mom = empirical_moments(np.tile(c, (4, 1)))
    assert np.allclose(mom.m, c) and np.allclose(mom.E, np.outer(c, c))
    assert np.allclose(mom.covariance, 0)
    with pytest.raises(ConfigurationError):
        empirical_moments(np.ones((1, 3)))


def test_covariance_examples():
    ens = Ensemble([[0.0], [2.0]])
    G3 = LinearModel([[3.0]])
    assert np.allclose(covariance_cu(ens, G3), [[3.0]])
    assert np.allclose(covariance_du(ens, G3), [[9.0]])
    flat = Ensemble(np.ones((5, 2)))
    assert np.allclose(covariance_cu(flat, LinearModel(np.ones((3, 2)))), 0)
    assert np.allclose(covariance_du(flat, LinearModel(np.ones((3, 2)))), 0)


def test_covariance_identities(rng):
    model, noise, _ = random_linear_problem(rng, 4, 3)
    U = rng.standard_normal((9, 4))
    mom = empirical_moments(U)
    assert np.allclose(covariance_cu(U, model), mom.covariance @ model.matrix.T, rtol=1e-10)
    D = covariance_du(U, model)
    assert np.array_equal(D, D.T)
    assert np.linalg.eigvalsh(D).min() >= -1e-12


def test_discrete_step_examples():
    out = discrete_enkf_step(Ensemble([[0.0], [2.0]]), SCALAR, UNIT, [1.0], 1.0, Sigma.ZERO)
    assert np.allclose(out.members, [[0.5], [1.5]])
    flat = Ensemble(np.full((3, 1), 4.0))
    assert np.array_equal(discrete_enkf_step(flat, SCALAR, UNIT, [1.0], 0.5).members, flat.members)
    at_data = Ensemble([[1.0, 0.0], [1.0, 0.0]])
    # G maps both members to y: zero innovation
    G = LinearModel([[1.0, 5.0]])
    out = discrete_enkf_step(at_data, G, UNIT, [1.0], 1.0)
    assert np.array_equal(out.members, at_data.members)


def test_discrete_step_errors(rng):
    with pytest.raises(ConfigurationError):
        discrete_enkf_step(Ensemble([[0.0], [1.0]]), SCALAR, UNIT, [1.0], 0.0)
    with pytest.raises(ConfigurationError):
        discrete_enkf_step(Ensemble([[0.0], [1.0]]), SCALAR, UNIT, [1.0], 1.0,
                           Sigma.GAMMA_INVERSE)
    out = discrete_enkf_step(Ensemble([[0.0], [1.0]]), SCALAR, UNIT, [1.0], 1.0,
                             Sigma.GAMMA_INVERSE, rng=rng)
    assert np.all(np.isfinite(out.members))


def test_gradient_drift_examples():
    drift = gradient_flow_drift(Ensemble([[0.0], [2.0]]), SCALAR, UNIT, [2.0])
    assert np.allclose(drift, [[2.0], [0.0]])
    flat = np.tile([1.0, 2.0], (4, 1))
    assert np.allclose(gradient_flow_drift(flat, LinearModel(np.eye(2)), NoiseModel(np.eye(2)),
                                           [0.0, 0.0]), 0)
    nl = NonlinearModel(nonlinear_forward, 2, 2)
    with pytest.raises(UnsupportedOperation):
        gradient_flow_drift(flat, nl, NoiseModel(np.eye(2)), [0.0, 0.0])


def test_residual_equals_gradient_drift(rng):
    for _ in range(50):
        d, K = rng.integers(1, 7, size=2)
        J = int(rng.integers(2, 12))
        model, noise, y = random_linear_problem(rng, d, K)
        U = rng.standard_normal((J, d))
        a = residual_drift(U, model, noise, y)
        b = gradient_flow_drift(U, model, noise, y)
        assert np.allclose(a, b, rtol=1e-10, atol=1e-10 * np.abs(b).max())


def test_drift_in_span_of_deviations(rng):
    model, noise, y = random_linear_problem(rng, 8, 8)
    U = rng.standard_normal((3, 8))
    drift = gradient_flow_drift(U, model, noise, y)
    dev = U - U.mean(axis=0)
    assert np.linalg.matrix_rank(np.vstack([dev, drift]), tol=1e-9) == np.linalg.matrix_rank(dev, tol=1e-9)


def test_residual_drift_nonlinear_smoke():
    nl = NonlinearModel(nonlinear_forward, 2, 2, batch=nonlinear_forward)
    U = np.array([[-2.6, 104.4], [-2.7, 104.6], [-2.65, 104.5]])
    drift = residual_drift(U, nl, NoiseModel.isotropic(0.1, 2), [27.5, 79.7])
    assert drift.shape == (3, 2) and np.all(np.isfinite(drift))
    assert np.allclose(residual_drift(np.tile(U[0], (3, 1)), nl, NoiseModel(np.eye(2)), [0, 0]), 0)


def test_subspace_invariance_discrete_and_euler():
    prob = build_linear_elliptic(64, "one", 0.01, seed=0)
    U0 = prob.sample_prior(10, 3).members
    U = Ensemble(U0)
    V = U0.copy()
    for _ in range(200):
        U = discrete_enkf_step(U, prob.model, prob.noise, prob.y, 1.0)
        # half the stable step: eps = 1/rho would annihilate one mode per step
        eps = 0.5 * stable_epsilon(empirical_moments(V), prob.model, prob.noise, T_fin=1.0)
        V = euler_step(V, prob.model, prob.noise, prob.y, eps, drift="gradient").members
    assert complement_residual(U.members, U0) <= 1e-8
    assert complement_residual(V, U0) <= 1e-8


def test_phi_of_mean_nonincreasing_along_euler(rng):
    model, noise, y = random_linear_problem(rng, 5, 5)
    U = rng.standard_normal((12, 5))
    prev = least_squares(model, noise, y, U.mean(axis=0))
    for _ in range(100):
        eps = stable_epsilon(empirical_moments(U), model, noise, T_fin=1e3)
        U = euler_step(U, model, noise, y, eps, drift="gradient").members
        cur = least_squares(model, noise, y, U.mean(axis=0))
        assert cur <= prev + 1e-8
        prev = cur
        assert np.linalg.eigvalsh(empirical_moments(U).covariance).min() >= -1e-10


def test_euler_noise_branch(rng):
    model, noise, y = random_linear_problem(rng, 3, 2)
    U = rng.standard_normal((6, 3))
    with pytest.raises(ConfigurationError):
        euler_step(U, model, noise, y, 0.1, drift="gradient", sigma=Sigma.GAMMA_INVERSE, rng=rng)
    with pytest.raises(ConfigurationError):
        euler_step(U, model, noise, y, 0.1, drift="other")
    out = euler_step(U, model, noise, y, 0.1, sigma="gamma_inverse", rng=np.random.default_rng(1))
    again = euler_step(U, model, noise, y, 0.1, sigma="gamma_inverse", rng=np.random.default_rng(1))
    assert np.array_equal(out.members, again.members)
    assert not np.allclose(out.members, euler_step(U, model, noise, y, 0.1).members)


def test_gradient_flow_rk4_matches_fine_euler(rng):
    model, noise, y = random_linear_problem(rng, 3, 3)
    U = rng.standard_normal((5, 3))
    (rk,) = integrate_gradient_flow(U, model, noise, y, [0.5], cfl=0.05)
    V = U.copy()
    h = 0.5 / 20000
    for _ in range(20000):
        V = V + h * gradient_flow_drift(V, model, noise, y)
    assert np.allclose(rk, V, atol=1e-3)
    with pytest.raises(ConfigurationError):
        integrate_gradient_flow(U, model, noise, y, [1.0, 0.5])


def test_csv_roundtrip(tmp_path, rng):
    U = rng.standard_normal((4, 3))
    path = write_ensemble_csv(tmp_path / "ens.csv", U)
    assert path.read_text().splitlines()[0] == "u0,u1,u2"
    assert np.array_equal(read_ensemble_csv(path).members, U)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_moments_psd_and_symmetric(J, d, seed):
    U = np.random.default_rng(seed).standard_normal((J, d)) * 10
    mom = empirical_moments(U)
    assert np.array_equal(mom.E, mom.E.T)
    C = mom.covariance
    assert np.linalg.eigvalsh(0.5 * (C + C.T)).min() >= -1e-10 * max(1.0, np.trace(mom.E))
