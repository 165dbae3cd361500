import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kenkf.ensemble import MomentState, empirical_moments
from kenkf.errors import ConfigurationError, NotCovered
from kenkf.meanfield import SolverConfig, run
from kenkf.moments import (ScalarMomentSystem, closed_form_solutions, ddim_moment_rhs,
                           fixed_points, integrate, integrate_ddim_moments, jacobian,
                           nullclines, parabola_point, rhs, rhs_residual, vector_field_grid,
                           write_fixed_points_csv, write_grid_csv, write_nullclines_csv)
from kenkf.problem import LinearModel, NoiseModel
from kenkf.problems import InverseProblem
from kenkf.ensemble import Ensemble
from kenkf.problem import Observation

from conftest import random_linear_problem

ys = st.floats(-4, 4).filter(lambda v: abs(v) > 0.1)
Gs = st.floats(-3, 3).filter(lambda v: abs(v) > 0.2)


def fd_jacobian(sys, p, h=1e-6):
    Jm = np.empty((2, 2))
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        Jm[:, k] = (np.array(rhs(sys, p + e)) - np.array(rhs(sys, p - e))) / (2 * h)
    return Jm


def test_system_validation():
    with pytest.raises(ConfigurationError):
        ScalarMomentSystem(1.0, 0.0)
    with pytest.raises(ConfigurationError):
        ScalarMomentSystem(1.0, 1.0, -1.0)


def test_rhs_on_parabola_and_at_F1():
    sys = ScalarMomentSystem(2.0, 1.0)
    for k in np.linspace(-3, 3, 13):
        assert rhs(sys, (k, k * k)) == (0.0, 0.0)
    assert rhs(sys, (2.0, 4.0)) == (0.0, 0.0)


@settings(max_examples=100, deadline=None)
@given(ys, Gs, st.floats(0, 50), st.floats(-5, 5), st.floats(-5, 30))
def test_jacobian_matches_finite_differences(y, G, lam2, m, E):
    sys = ScalarMomentSystem(y, G, lam2)
    p = np.array([m, E])
    Ja, Jf = jacobian(sys, p), fd_jacobian(sys, p)
    assert np.linalg.norm(Ja - Jf) <= 1e-6 * max(1.0, np.linalg.norm(Ja))


def test_fixed_points_without_noise():
    sys = ScalarMomentSystem(2.0, 1.0)
    fps = {f.label: f for f in fixed_points(sys)}
    assert (fps["F1"].point.m, fps["F1"].point.E) == (2.0, 4.0)
    assert (fps["F0"].point.m, fps["F0"].point.E) == (0.0, 0.0)
    for f in fps.values():
        assert f.classification == "non-hyperbolic"
        assert np.allclose(f.eigenvalues, 0, atol=1e-12)
        assert "E = m^2" in f.note
    assert parabola_point(sys, -1.5).classification == "non-hyperbolic"
    with pytest.raises(ConfigurationError):
        parabola_point(ScalarMomentSystem(2.0, 1.0, 1.0), 1.0)


@given(ys, Gs, st.floats(-4, 4), st.floats(0, 1e-3))
@settings(max_examples=60, deadline=None)
def test_parabola_spectrum_is_nilpotent(y, G, k, lam2):
    sys = ScalarMomentSystem(y, G)
    Jm = jacobian(sys, (k, k * k))
    scale = max(1.0, np.abs(Jm).max())
    # trace and determinant of the rank-one Jacobian vanish up to roundoff
    assert abs(np.trace(Jm)) <= 1e-12 * scale
    assert abs(np.linalg.det(Jm)) <= 1e-12 * scale**2
    assert parabola_point(sys, k).eigenvalues == (0j, 0j)
    # the noise term is constant, so the Jacobian does not depend on lambda2
    assert np.array_equal(Jm, jacobian(ScalarMomentSystem(y, G, lam2), (k, k * k)))


def test_fixed_points_with_noise():
    sys = ScalarMomentSystem(2.0, 1.0, 32.0)
    fps = {f.label: f for f in fixed_points(sys)}
    plus, minus = fps["F1+"], fps["F1-"]
    assert plus.point.m == pytest.approx(2.0, abs=1e-10)
    assert plus.point.E == pytest.approx(8.0, abs=1e-10)
    assert np.allclose(sorted(np.real(plus.eigenvalues)), [-16, -4], atol=1e-8)
    assert plus.stable and plus.point.admissible
    assert (minus.point.m, minus.point.E) == pytest.approx((2.0, 0.0))
    assert minus.classification == "unstable" and not minus.point.admissible


@settings(max_examples=60, deadline=None)
@given(ys, Gs, st.floats(0.01, 40))
def test_eigenvalues_follow_closed_forms(y, G, lam2):
    sys = ScalarMomentSystem(y, G, lam2)
    s = math.sqrt(2 * lam2)
    fps = {f.label: f for f in fixed_points(sys)}
    for label, sign in (("F1+", 1), ("F1-", -1)):
        ev = sorted(np.real(fps[label].eigenvalues))
        expected = sorted([-sign * G / 2 * s, -sign * 2 * G * s])
        assert np.allclose(ev, expected, rtol=1e-8, atol=1e-8)
        assert np.allclose(rhs(sys, (fps[label].point.m, fps[label].point.E)), 0, atol=1e-9)


def test_lambda_bound():
    y, G = 2.0, 1.0
    bound = ScalarMomentSystem(y, G).lambda_bound()
    assert bound == pytest.approx(y**2 * math.sqrt(2) / G)
    for lam in (0.5 * bound, 0.99 * bound, 1.01 * bound, 2 * bound):
        minus = [f for f in fixed_points(ScalarMomentSystem(y, G, lam**2)) if f.label == "F1-"][0]
        assert (minus.point.E < 0) == (lam > bound)


def test_eigenvalues_vanish_as_noise_vanishes():
    prev = np.inf
    for lam2 in (1.0, 1e-2, 1e-4, 1e-6, 1e-8):
        mx = max(np.abs(f.eigenvalues).max() for f in fixed_points(ScalarMomentSystem(2.0, 1.0, lam2)))
        assert mx < prev
        prev = mx
    assert prev < 1e-3


@pytest.mark.parametrize("lam2", [0.0, 3.0])
def test_nullclines_zero_their_component(lam2):
    sys = ScalarMomentSystem(1.5, -0.7, lam2)
    m = np.linspace(-3, 3, 41)
    for nc in nullclines(sys):
        if nc.vertical:
            pts = [(nc.m_value, E) for E in np.linspace(-2, 5, 11)]
        else:
            pts = list(zip(m, nc(m)))
        idx = 0 if nc.component == "m" else 1
        for p in pts:
            assert abs(rhs(sys, p)[idx]) <= 1e-9 * (1 + abs(p[1]) ** 2)
    names = [nc.name for nc in nullclines(sys)]
    assert names[:2] == ["m=y/G", "E=m^2"]


def test_noisy_nullclines_reduce_to_noise_free():
    y, G = 2.0, 1.0
    m = np.linspace(-2, 4, 25)
    plus, minus = nullclines(ScalarMomentSystem(y, G, 1e-14))[2:]
    noisefree = nullclines(ScalarMomentSystem(y, G))[2]
    lo, hi = np.minimum(plus(m), minus(m)), np.maximum(plus(m), minus(m))
    other = np.where(np.isclose(lo, m**2, atol=1e-6), hi, lo)
    assert np.allclose(other, noisefree(m), atol=1e-6)
    with pytest.raises(TypeError):
        nullclines(ScalarMomentSystem(y, G))[0](1.0)


def test_integrate_monotone_decay_on_vertical_nullcline():
    sys = ScalarMomentSystem(2.0, 1.0)
    traj = integrate(sys, (2.0, 6.0), 10.0)
    assert not traj.blow_up
    assert np.allclose(traj.m, 2.0)
    assert np.all(np.diff(traj.E) <= 0) and traj.E[-1] > 4.0
    assert traj.E[-1] == pytest.approx(4.0 + 1.0 / (2 * (0.25 + 10.0)), rel=1e-9)


def test_integrate_blow_up_below_equilibrium():
    traj = integrate(ScalarMomentSystem(2.0, 1.0), (2.0, 3.5), 10.0)
    assert traj.blow_up
    assert traj.t[-1] == pytest.approx(1.0, abs=1e-6)  # C = -1 for E0 = 3.5


def test_integrate_converges_to_stabilized_equilibrium():
    traj = integrate(ScalarMomentSystem(2.0, 1.0, 32.0), (2.0, 5.0), 10.0)
    assert (traj.m[-1], traj.E[-1]) == pytest.approx((2.0, 8.0), abs=1e-8)
    with pytest.raises(ConfigurationError):
        integrate(ScalarMomentSystem(2.0, 1.0), (2.0, 5.0), 1.0, tol=0.0)


@pytest.mark.parametrize("sys,p0,branch", [
    (ScalarMomentSystem(2.0, 1.0), (2.0, 5.0), "riccati"),
    (ScalarMomentSystem(-1.0, 0.5), (-2.0, 4.5), "riccati"),
    (ScalarMomentSystem(2.0, 1.0, 32.0), (2.0, 5.0), "tanh"),
    (ScalarMomentSystem(2.0, 1.0, 32.0), (2.0, 1.0), "tanh"),
    (ScalarMomentSystem(2.0, 1.0, 32.0), (2.0, 10.0), "coth"),
    (ScalarMomentSystem(2.0, 1.0), (1.0, 2.0), "sqrt"),
    (ScalarMomentSystem(2.0, 1.0), (3.0, 10.0), "sqrt"),
    (ScalarMomentSystem(2.0, 1.0, 32.0), (2.5, 10.25), "exp"),
])
def test_closed_forms_match_integrator(sys, p0, branch):
    cf = closed_form_solutions(sys, p0)
    assert cf.branch == branch
    t = np.linspace(0, 10, 401)
    m, E = cf(t)
    z = integrate(sys, p0, 10.0, tol=1e-12).at(t)
    assert np.abs(m - z[0]).max() <= 1e-6 and np.abs(E - z[1]).max() <= 1e-6
    assert rhs_residual(sys, cf, t).max() <= 1e-8
    assert m[0] == pytest.approx(p0[0], abs=1e-12) and E[0] == pytest.approx(p0[1], abs=1e-10)


def test_riccati_constant_sign_and_blow_up():
    sys = ScalarMomentSystem(2.0, 1.0)
    assert closed_form_solutions(sys, (2.0, 5.0)).constants["C"] > 0
    cf = closed_form_solutions(sys, (2.0, 3.0))
    assert cf.constants["C"] < 0
    assert cf.blow_up_time == pytest.approx(0.5)
    assert closed_form_solutions(sys, (2.0, 4.0)).branch == "equilibrium"


def test_tanh_branch_limits():
    for lam2 in (1.0, 1e-2, 1e-4):
        sys = ScalarMomentSystem(2.0, 1.0, lam2)
        cf = closed_form_solutions(sys, (2.0, 4.0 + 0.1 * math.sqrt(2 * lam2) / 2))
        assert cf.E(1e4) == pytest.approx(4.0 + math.sqrt(2 * lam2) / 2, rel=1e-12)


def test_uncovered_exponential_pair():
    with pytest.raises(NotCovered):
        closed_form_solutions(ScalarMomentSystem(2.0, 1.0, 32.0), (2.5, 9.0))
    with pytest.raises(NotCovered):
        closed_form_solutions(ScalarMomentSystem(2.0, 1.0, 32.0), (1.5, 9.0))


def test_vector_field_grid(tmp_path):
    sys = ScalarMomentSystem(2.0, 1.0, 32.0)
    m, E, dm, dE = vector_field_grid(sys, (0, 4), (0, 10), 40)
    assert m.shape == (40, 40)
    for i, j in ((0, 0), (13, 27), (39, 39)):
        assert (dm[i, j], dE[i, j]) == pytest.approx(rhs(sys, (m[i, j], E[i, j])))
    path = write_grid_csv(tmp_path / "g.csv", (m, E, dm, dE))
    lines = path.read_text().splitlines()
    assert lines[0] == "m,E,dm,dE" and len(lines) == 1601
    write_nullclines_csv(tmp_path / "n.csv", sys, (0, 4), (0, 10), 20)
    write_fixed_points_csv(tmp_path / "f.csv", fixed_points(sys))
    assert "F1+,2,8,stable" in (tmp_path / "f.csv").read_text()
    with pytest.raises(ConfigurationError):
        vector_field_grid(sys, (0, 1), (0, 1), 0)


# ---------------------------------------------------------- d-dimensional ---

@settings(max_examples=50, deadline=None)
@given(ys, Gs, st.floats(0, 5), st.integers(0, 2**32 - 1))
def test_ddim_reduces_to_scalar_system(y, G, lam2, seed):
    U = np.random.default_rng(seed).standard_normal((15, 1)) * 2 + 1
    dm, dE = ddim_moment_rhs(LinearModel([[G]]), NoiseModel([[1.0]]), [y], U, lambda2=lam2)
    mom = empirical_moments(U)
    sm, sE = rhs(ScalarMomentSystem(y, G, lam2), (mom.m[0], mom.E[0, 0]))
    assert dm[0] == pytest.approx(sm, rel=1e-10, abs=1e-10)
    assert dE[0, 0] == pytest.approx(sE, rel=1e-10, abs=1e-10)


def test_ddim_particle_and_closed_moment_forms_agree(rng):
    model, noise, y = random_linear_problem(rng, 4, 3)
    U = rng.standard_normal((30, 4))
    a = ddim_moment_rhs(model, noise, y, U, lambda2=0.3)
    b = ddim_moment_rhs(model, noise, y, empirical_moments(U), lambda2=0.3)
    assert np.allclose(a[0], b[0], atol=1e-12) and np.allclose(a[1], b[1], atol=1e-12)
    L = np.diag([0.1, 0.2, 0.3, 0.4])
    c = ddim_moment_rhs(model, noise, y, U, Lambda=L)
    assert np.allclose(c[1] - a[1], L - 0.3 * np.eye(4))


def test_ddim_trivial_cases(rng):
    model, noise, y = random_linear_problem(rng, 3, 3)
    c = rng.standard_normal(3)
    dm, dE = ddim_moment_rhs(model, noise, y, np.tile(c, (5, 1)))
    assert np.allclose(dm, 0) and np.allclose(dE, 0)
    u_star = np.linalg.solve(model.matrix, y)
    U = u_star + rng.standard_normal((6, 3))
    U = U - U.mean(axis=0) + u_star
    dm, _ = ddim_moment_rhs(model, noise, y, U)
    assert np.allclose(dm, 0, atol=1e-10)


def test_ddim_first_moment_tracks_particle_solver():
    rng = np.random.default_rng(5)
    model, noise, y = random_linear_problem(rng, 3, 3)
    U0 = rng.standard_normal((400, 3))
    prob = InverseProblem("toy", model, noise, Observation(y=y), lambda J, s: Ensemble(U0), 1.0)
    trace = run(prob, SolverConfig(J=400, stopping="time", T_fin=2.0), initial=U0)
    times = [r.t for r in trace.all_records]
    ms, _ = integrate_ddim_moments(model, noise, y, empirical_moments(U0), times)
    # the solver's mean takes Euler steps of the moment system: O(eps) per unit time
    err = np.abs(trace.mean - ms[-1]).max()
    eps_max = max(r.eps for r in trace.records)
    assert err <= eps_max * times[-1] * (1 + np.abs(ms).max())
