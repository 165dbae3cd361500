import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kenkf.errors import ConfigurationError, UnsupportedOperation
from kenkf.problem import (LinearModel, NoiseModel, NonlinearModel, Observation, apply_forward,
                           gradient_phi, gradient_phi_batch, least_squares)
from kenkf.problems import nonlinear_forward

from conftest import random_linear_problem, random_spd


def fd_gradient(f, u, h=1e-5):
    g = np.empty_like(u)
    for i in range(u.size):
        e = np.zeros_like(u)
        e[i] = h
        g[i] = (f(u + e) - f(u - e)) / (2 * h)
    return g


def test_apply_forward_examples():
    assert np.allclose(apply_forward(LinearModel(np.eye(2)), [3, -1]), [3, -1])
    assert np.allclose(apply_forward(LinearModel([[2.0]]), [1.0]), [2.0])
    nl = NonlinearModel(nonlinear_forward, d=2, K=2)
    np.testing.assert_allclose(apply_forward(nl, [0.0, 1.0]), [0.34375, 0.84375], rtol=0, atol=1e-15)


def test_dimension_mismatch_is_configuration_error():
    with pytest.raises(ConfigurationError):
        apply_forward(LinearModel(np.eye(3)), [1.0, 2.0])
    with pytest.raises(ConfigurationError):
        least_squares(LinearModel(np.eye(2)), NoiseModel(np.eye(2)), [1.0, 2.0, 3.0], [0, 0])


def test_least_squares_examples():
    G = LinearModel([[1.0]])
    assert least_squares(G, NoiseModel([[1.0]]), [2.0], [1.0]) == pytest.approx(0.5)
    assert least_squares(G, NoiseModel([[4.0]]), [2.0], [1.0]) == pytest.approx(2.0)
    assert least_squares(G, NoiseModel([[4.0]]), [3.0], [3.0]) == 0.0


def test_gradient_examples():
    assert gradient_phi(LinearModel([[1.0]]), NoiseModel([[1.0]]), [2.0], [1.0]) == pytest.approx(-1.0)
    assert gradient_phi(LinearModel([[2.0]]), NoiseModel([[1.0]]), [2.0], [0.0]) == pytest.approx(-4.0)
    rng = np.random.default_rng(3)
    model, noise, _ = random_linear_problem(rng, 4, 4)
    u = rng.standard_normal(4)
    assert np.allclose(gradient_phi(model, noise, model.apply(u), u), 0.0)


def test_gradient_matches_finite_differences(rng):
    for _ in range(100):
        d, K = rng.integers(1, 9, size=2)
        model, noise, y = random_linear_problem(rng, d, K)
        u = rng.standard_normal(d)
        g = gradient_phi(model, noise, y, u)
        fd = fd_gradient(lambda v: least_squares(model, noise, y, v), u)
        assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(g), 1e-12)


def test_gradient_batch_rows(rng):
    model, noise, y = random_linear_problem(rng, 5, 3)
    U = rng.standard_normal((7, 5))
    G = gradient_phi_batch(model, noise, y, U)
    for u, g in zip(U, G):
        assert np.allclose(g, gradient_phi(model, noise, y, u))


def test_gradient_unsupported_for_nonlinear():
    nl = NonlinearModel(nonlinear_forward, d=2, K=2)
    with pytest.raises(UnsupportedOperation):
        gradient_phi(nl, NoiseModel(np.eye(2)), [0.0, 0.0], [0.0, 1.0])


def test_noise_model_sqrt_and_validation(rng):
    gam = random_spd(rng, 6, cond=1e4)
    nm = NoiseModel(gam)
    S = nm.gamma_sqrt
    assert np.linalg.norm(S.T @ S - gam) <= 1e-12 * np.linalg.norm(gam)
    assert np.allclose(nm.covariance @ gam, np.eye(6), atol=1e-8)
    with pytest.raises(ConfigurationError):
        NoiseModel([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ConfigurationError):
        NoiseModel([[1.0, 0.0], [0.0, -1.0]])
    iso = NoiseModel.isotropic(0.1, 3)
    assert np.allclose(iso.gamma, 100 * np.eye(3))


def test_observation_validates_lengths():
    with pytest.raises(ConfigurationError):
        Observation(y=[1.0, 2.0], eta=[1.0])


def test_linear_operator_input_matches_dense(rng):
    from scipy.sparse.linalg import aslinearoperator

    A = rng.standard_normal((4, 3))
    dense, op = LinearModel(A), LinearModel(aslinearoperator(A))
    U = rng.standard_normal((5, 3))
    assert np.allclose(dense.apply_batch(U), op.apply_batch(U))
    assert np.allclose(op.matrix, A)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1),
       st.floats(-5, 5), st.floats(-5, 5))
def test_linear_model_is_linear(d, K, seed, a, b):
    rng = np.random.default_rng(seed)
    model = LinearModel(rng.standard_normal((K, d)))
    u, v = rng.standard_normal((2, d))
    lhs = model.apply(a * u + b * v)
    rhs = a * model.apply(u) + b * model.apply(v)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * (1 + np.abs(rhs).max()))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_phi_nonnegative_and_root_invariant(K, seed):
    rng = np.random.default_rng(seed)
    model, noise, y = random_linear_problem(rng, 3, K)
    u = rng.standard_normal(3)
    phi = least_squares(model, noise, y, u)
    assert phi >= 0.0
    # any square root of Gamma gives the same value, e.g. the Cholesky factor
    L = np.linalg.cholesky(noise.gamma)
    r = L.T @ (y - model.apply(u))
    assert phi == pytest.approx(0.5 * r @ r, rel=1e-10)
