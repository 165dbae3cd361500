"""Moment equations of the mean-field limit and their phase-plane analysis.

For a scalar control with scalar model ``G`` and datum ``y`` the first and
second moments obey

    dm/dt = G (E - m^2) (y - G m)
    dE/dt = 2 G (E - m^2) (y m - G E) + lambda2

(``lambda2 = 0`` without injected noise). The d-dimensional right-hand side
is available for linear models through :func:`ddim_moment_rhs`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .ensemble import MomentState, as_members, empirical_moments
from .errors import ConfigurationError, NotCovered
from .fileio import write_csv
from .problem import LinearModel, NoiseModel, gradient_phi_batch

__all__ = [
    "ScalarMomentSystem",
    "PhasePoint",
    "Nullcline",
    "FixedPoint",
    "Trajectory",
    "ClosedForm",
    "rhs",
    "jacobian",
    "nullclines",
    "fixed_points",
    "integrate",
    "closed_form_solutions",
    "rhs_residual",
    "vector_field_grid",
    "ddim_moment_rhs",
    "integrate_ddim_moments",
    "BLOWUP_LIMIT",
]

BLOWUP_LIMIT = 1e12
MIN_STEP = 1e-14


@dataclass(frozen=True)
class ScalarMomentSystem:
    y: float
    G: float
    lambda2: float = 0.0

    def __post_init__(self):
        if self.G == 0:
            raise ConfigurationError("scalar model G must be non-zero")
        if self.lambda2 < 0:
            raise ConfigurationError("lambda2 must be non-negative")

    @property
    def m_star(self) -> float:
        return self.y / self.G

    @property
    def noise_shift(self) -> float:
        """``sqrt(2 lambda2) / (2 G)``: offset of the stabilized equilibria."""
        return math.sqrt(2.0 * self.lambda2) / (2.0 * self.G)

    def lambda_bound(self) -> float:
        """Standard deviation above which the unstable equilibrium has ``E < 0``."""
        return self.y**2 * math.sqrt(2.0) / abs(self.G)


@dataclass(frozen=True)
class PhasePoint:
    m: float
    E: float

    @property
    def admissible(self) -> bool:
        """Second moment dominates the squared mean (non-negative variance)."""
        return self.E >= self.m**2

    def __iter__(self):
        return iter((self.m, self.E))


def rhs(sys: ScalarMomentSystem, p) -> Tuple[float, float]:
    m, E = p
    var = E - m * m
    dm = sys.G * var * (sys.y - sys.G * m)
    dE = 2.0 * sys.G * var * (sys.y * m - sys.G * E) + sys.lambda2
    return dm, dE


def _rhs_array(sys, m, E):
    var = E - m * m
    return (sys.G * var * (sys.y - sys.G * m),
            2.0 * sys.G * var * (sys.y * m - sys.G * E) + sys.lambda2)


def jacobian(sys: ScalarMomentSystem, p) -> np.ndarray:
    m, E = p
    y, G = sys.y, sys.G
    return np.array([
        [3 * G**2 * m**2 - 2 * G * y * m - G**2 * E, -G**2 * m + G * y],
        [2 * G * y * E + 4 * G**2 * m * E - 6 * G * y * m**2,
         -4 * G**2 * E + 2 * G * y * m + 2 * G**2 * m**2],
    ])


# ------------------------------------------------------------ nullclines ---

@dataclass(frozen=True)
class Nullcline:
    """Curve on which one component of the vector field vanishes.

    ``component`` is ``"m"`` or ``"E"``; vertical lines carry ``m_value``,
    other branches are graphs ``E = func(m)``.
    """

    name: str
    component: str
    func: Optional[Callable] = None
    m_value: Optional[float] = None

    @property
    def vertical(self) -> bool:
        return self.m_value is not None

    def __call__(self, m):
        if self.vertical:
            raise TypeError(f"nullcline {self.name} is the vertical line m = {self.m_value}")
        return self.func(np.asarray(m, dtype=float))

    def sample(self, m_range, n: int = 200, E_range=None) -> np.ndarray:
        """``(k, 2)`` points ``(m, E)`` along the branch."""
        if self.vertical:
            lo, hi = E_range if E_range is not None else m_range
            E = np.linspace(lo, hi, n)
            return np.column_stack([np.full(n, self.m_value), E])
        m = np.linspace(*m_range, n)
        E = self(m)
        ok = np.isfinite(E)
        return np.column_stack([m[ok], E[ok]])


def nullclines(sys: ScalarMomentSystem) -> List[Nullcline]:
    y, G, lam2 = sys.y, sys.G, sys.lambda2
    out = [
        Nullcline("m=y/G", "m", m_value=y / G),
        Nullcline("E=m^2", "m", func=lambda m: m**2),
    ]
    if lam2 == 0.0:
        out.append(Nullcline("E=(y/G)m", "E", func=lambda m: (y / G) * m))
    else:
        def branch(sign):
            def f(m):
                root = np.sqrt(m**2 * (y - G * m) ** 2 + 2.0 * lam2)
                return (m * (y + G * m) + sign * root) / (2.0 * G)
            return f
        out.append(Nullcline("E+", "E", func=branch(+1.0)))
        out.append(Nullcline("E-", "E", func=branch(-1.0)))
    return out


# -------------------------------------------------------- fixed points ---

@dataclass(frozen=True)
class FixedPoint:
    label: str
    point: PhasePoint
    eigenvalues: Tuple[complex, complex]
    classification: str
    note: str = ""

    @property
    def stable(self) -> bool:
        return self.classification == "stable"


def classify(eigenvalues, tol: float = 1e-10) -> str:
    re = np.real(np.asarray(eigenvalues))
    scale = max(1.0, float(np.max(np.abs(eigenvalues))))
    if np.any(np.abs(re) <= tol * scale):
        return "non-hyperbolic"
    if np.all(re < 0):
        return "stable"
    if np.all(re > 0):
        return "unstable"
    return "saddle"


def _fixed_point(sys, label, m, E, note=""):
    if E - m * m == 0.0:
        # on the parabola the Jacobian is the rank-one matrix a (-2m, 1)^T with
        # a = (G(y - Gm), 2G(ym - GE)); its spectrum {0, -2 G^2 (E - m^2)} is
        # exact, whereas a general eigensolver loses half the digits on the
        # nilpotent matrix
        ev = np.array([0.0, -2.0 * sys.G**2 * (E - m * m)], dtype=complex)
    else:
        ev = np.linalg.eigvals(jacobian(sys, (m, E)))
    ev = tuple(sorted(ev, key=lambda z: (z.real, z.imag)))
    return FixedPoint(label, PhasePoint(float(m), float(E)), ev, classify(ev), note)


def fixed_points(sys: ScalarMomentSystem) -> List[FixedPoint]:
    """Equilibria with Jacobian spectra.

    Without noise every point of the parabola ``E = m^2`` is an equilibrium;
    ``F0`` and ``F1`` are reported explicitly and carry a note naming the
    family. With noise the two equilibria on ``m = y/G`` are returned.
    """
    ms = sys.m_star
    if sys.lambda2 == 0.0:
        family = "member of the equilibrium family E = m^2; Bogdanov-Takens type"
        return [
            _fixed_point(sys, "F0", 0.0, 0.0, family),
            _fixed_point(sys, "F1", ms, ms * ms, family),
        ]
    shift = sys.noise_shift
    return [
        _fixed_point(sys, "F1+", ms, ms * ms + shift),
        _fixed_point(sys, "F1-", ms, ms * ms - shift),
    ]


def parabola_point(sys: ScalarMomentSystem, k: float) -> FixedPoint:
    """Equilibrium ``F_k = (k, k^2)`` of the noise-free system."""
    if sys.lambda2 != 0.0:
        raise ConfigurationError("the parabola consists of equilibria only when lambda2 = 0")
    return _fixed_point(sys, f"F_k({k:g})", k, k * k)


# ----------------------------------------------------------- integrator ---

@dataclass
class Trajectory:
    t: np.ndarray
    m: np.ndarray
    E: np.ndarray
    blow_up: bool = False
    message: str = ""
    sol: Optional[Callable] = field(default=None, repr=False)

    def at(self, t) -> np.ndarray:
        """Dense interpolant ``(2, len(t))`` within the integrated interval."""
        if self.sol is None:
            raise ValueError("trajectory has no dense output")
        return self.sol(np.asarray(t, dtype=float))


def integrate(sys: ScalarMomentSystem, p0, t_end: float, tol: float = 1e-10,
              t_eval=None, max_step: float = np.inf) -> Trajectory:
    """Adaptive 8th-order Runge-Kutta (DOP853) trajectory of the moment system.

    Both relative and absolute local error tolerances are ``tol``. The run
    stops with ``blow_up=True`` once ``|m|`` or ``|E|`` exceeds
    ``BLOWUP_LIMIT`` or the step size collapses below ``MIN_STEP``.
    """
    if tol <= 0:
        raise ConfigurationError("tol must be positive")

    def f(t, z):
        return _rhs_array(sys, z[0], z[1])

    def escape(t, z):
        return BLOWUP_LIMIT - max(abs(z[0]), abs(z[1]))

    escape.terminal = True
    escape.direction = -1
    res = solve_ivp(f, (0.0, t_end), np.asarray(p0, dtype=float), method="DOP853",
                    rtol=tol, atol=tol, events=escape, dense_output=True,
                    t_eval=t_eval, max_step=max_step)
    blow = bool(res.status == 1)
    msg = res.message
    if res.status == -1:
        # step-size underflow ahead of a vertical asymptote
        blow = True
    return Trajectory(t=res.t, m=res.y[0], E=res.y[1], blow_up=blow, message=msg,
                      sol=res.sol)


# -------------------------------------------------------- closed forms ---

@dataclass
class ClosedForm:
    """Analytical solution ``(m(t), E(t))`` with its fitted constants."""

    branch: str
    m: Callable
    E: Callable
    constants: Dict[str, float]
    blow_up_time: Optional[float] = None

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(self.m(t), t.shape), np.broadcast_to(self.E(t), t.shape)


def _bracket_root(f, x0: float, target_sign_change_limit: int = 200):
    """Expand a bracket around ``x0`` until ``f`` changes sign."""
    a, b = x0 - 1.0, x0 + 1.0
    fa, fb = f(a), f(b)
    for _ in range(target_sign_change_limit):
        if np.sign(fa) != np.sign(fb):
            return a, b
        a, b = a - 2 * (b - a), b + 2 * (b - a)
        fa, fb = f(a), f(b)
    raise NotCovered("could not bracket the integration constant")


def _solve_positive(f, lo_exp=-300, hi_exp=300):
    """Root of a monotone ``f`` on ``(0, inf)`` using a log-spaced bracket."""
    g = lambda s: f(math.exp(s))
    grid = np.linspace(lo_exp, hi_exp, 121) * math.log(10) / 10
    vals = [g(s) for s in grid]
    for s0, s1, v0, v1 in zip(grid, grid[1:], vals, vals[1:]):
        if np.isfinite(v0) and np.isfinite(v1) and np.sign(v0) != np.sign(v1):
            return math.exp(brentq(g, s0, s1, xtol=1e-15, rtol=4 * np.finfo(float).eps))
    raise NotCovered("could not bracket the integration constant")


def closed_form_solutions(sys: ScalarMomentSystem, p0, *, rtol: float = 1e-12) -> ClosedForm:
    """Analytical solution through ``p0``; constants are fitted by root solves.

    Covered branches: ``m(0) = y/G`` (``riccati`` for ``lambda2 = 0``;
    ``tanh``/``coth`` for ``lambda2 > 0``) and, for ``lambda2 = 0`` and
    ``m(0) != y/G``, the square-root pair ``sqrt``. Anything else raises
    :class:`NotCovered`.
    """
    m0, E0 = (float(v) for v in p0)
    y, G, lam2 = sys.y, sys.G, sys.lambda2
    ms = y / G
    on_line = abs(m0 - ms) <= rtol * max(1.0, abs(ms))
    if on_line:
        delta0 = E0 - ms * ms
        if lam2 == 0.0:
            if delta0 == 0.0:
                return ClosedForm("equilibrium", lambda t: ms + 0 * t,
                                  lambda t: ms * ms + 0 * t, {})
            # E(0) = y^2/G^2 + 1/(2 G^2 C) = E0
            resid = lambda C: 1.0 / (2.0 * G**2 * C) - delta0
            C = _solve_positive(resid) if delta0 > 0 else -_solve_positive(lambda c: resid(-c))
            return ClosedForm(
                "riccati",
                lambda t: ms + 0 * np.asarray(t, dtype=float),
                lambda t: ms * ms + 1.0 / (2.0 * G**2 * (C + np.asarray(t, dtype=float))),
                {"C": C},
                blow_up_time=(-C if C < 0 else None),
            )
        s = math.sqrt(2.0 * lam2)
        amp = s / (2.0 * G)
        ratio = delta0 / amp
        if abs(ratio) < 1.0:
            resid = lambda C: amp * math.tanh(s * G * C) - delta0
            lo, hi = _bracket_root(resid, 0.0)
            C = brentq(resid, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
            return ClosedForm(
                "tanh",
                lambda t: ms + 0 * np.asarray(t, dtype=float),
                lambda t: (np.tanh(s * G * C + s * G * np.asarray(t, dtype=float)) * s * G
                           + 2.0 * y**2) / (2.0 * G**2),
                {"C": C},
            )
        if abs(ratio) == 1.0:
            return ClosedForm("equilibrium", lambda t: ms + 0 * t,
                              lambda t: E0 + 0 * t, {})

        def coth(x):
            return 1.0 / np.tanh(x)

        resid = lambda C: amp * coth(s * G * C) - delta0
        # coth(sGC) = ratio has one root with the sign of ratio * sign(sG)
        sgn = 1.0 if ratio * G > 0 else -1.0
        C = sgn * _solve_positive(lambda c: resid(sgn * c))
        blow = -C if C < 0 and G > 0 else (-C if C < 0 else None)
        return ClosedForm(
            "coth",
            lambda t: ms + 0 * np.asarray(t, dtype=float),
            lambda t: ms * ms + amp * coth(s * G * (C + np.asarray(t, dtype=float))),
            {"C": C},
            blow_up_time=blow,
        )

    if lam2 != 0.0:
        return _exponential_pair(sys, m0, E0)
    var0 = E0 - m0 * m0
    if var0 == 0.0:
        return ClosedForm("equilibrium", lambda t: m0 + 0 * t, lambda t: E0 + 0 * t, {})
    sign = 1.0 if (m0 - ms) > 0 else -1.0

    def m_of(t, C1, C2):
        return ms + sign / (G * np.sqrt(-2.0 * C1 * G * t - 2.0 * C2 * G))

    def dm_of(t, C1, C2):
        q = -2.0 * C1 * G * t - 2.0 * C2 * G
        return sign * C1 / q**1.5

    def E_of(t, C1, C2):
        m = m_of(t, C1, C2)
        return m**2 + dm_of(t, C1, C2) / (G * (y - G * m))

    # m(0) = m0 fixes C2 (the argument -2 C2 G must be positive)
    w2 = (m0 - ms) ** 2
    g_sign = 1.0 if G > 0 else -1.0
    C2 = -g_sign * _solve_positive(lambda c: 1.0 / (G**2 * 2.0 * c * abs(G)) - w2)
    # E(0) = E0 is then linear in C1; solve it as a bracketed root anyway
    resid = lambda C1: E_of(0.0, C1, C2) - E0
    lo, hi = _bracket_root(resid, 0.0)
    C1 = brentq(resid, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps)
    q_rate = -2.0 * C1 * G
    blow = None
    if q_rate < 0:
        blow = (2.0 * C2 * G) / q_rate  # root of -2 C1 G t - 2 C2 G
    return ClosedForm(
        "sqrt",
        lambda t: m_of(np.asarray(t, dtype=float), C1, C2),
        lambda t: E_of(np.asarray(t, dtype=float), C1, C2),
        {"C1": C1, "C2": C2},
        blow_up_time=blow,
    )


def _exponential_pair(sys, m0, E0, t_check=10.0, tol=1e-6) -> ClosedForm:
    """Two-constant family for ``lambda2 > 0`` and ``m(0) != y/G``.

    The constants are fitted at ``t = 0``; the candidate is then checked
    against the moment equations and rejected (``NotCovered``) if the
    residual exceeds ``tol`` relative to the vector-field magnitude.
    """
    y, G = sys.y, sys.G
    ms = y / G
    s = math.sqrt(2.0 * sys.lambda2)
    a = s * G
    w0 = m0 - ms
    if w0 * G <= 0:
        raise NotCovered("exponential pair needs (m(0) - y/G) with the sign of G")

    def m_of(t, C1, C2):
        e2 = np.exp(2 * a * t)
        return ms + np.sqrt(s * C1 * e2 * np.exp(a * t) - C2 * s * e2) / ((C1 * e2 - C2) * G)

    def E_of(t, C1, C2):
        # E = m^2 + m' / (G (y - G m)) = m^2 - (d/dt log w) / G^2 with w = m - y/G,
        # evaluated through the logarithmic derivative so that w -> 0 stays accurate
        e1 = np.exp(a * t)
        e2 = e1 * e1
        dlogw = a + 0.5 * a * C1 * e1 / (C1 * e1 - C2) - 2.0 * a * C1 * e2 / (C1 * e2 - C2)
        return m_of(t, C1, C2) ** 2 - dlogw / G**2

    # m(0) = m0 fixes D = C1 - C2 > 0; E(0) = E0 then fixes C1
    D = _solve_positive(lambda D: math.sqrt(s / D) / abs(G) - abs(w0))
    resid = lambda C1: E_of(0.0, C1, C1 - D) - E0
    try:
        lo, hi = _bracket_root(resid, D)
        C1 = brentq(resid, lo, hi, xtol=1e-14)
    except (NotCovered, ValueError) as exc:
        raise NotCovered(f"exponential pair cannot match E(0) = {E0}") from exc
    C2 = C1 - D
    cf = ClosedForm("exp", lambda t: m_of(np.asarray(t, float), C1, C2),
                    lambda t: E_of(np.asarray(t, float), C1, C2), {"C1": C1, "C2": C2})
    t = np.linspace(0.0, t_check, 101)
    res = rhs_residual(sys, cf, t)
    if not np.all(np.isfinite(res)) or np.max(res) > tol:
        raise NotCovered("fitted exponential pair does not satisfy the moment equations "
                         f"(relative residual {np.nanmax(res):.2e}); only C2 = 0 solves them")
    return cf


def rhs_residual(sys: ScalarMomentSystem, cf: ClosedForm, t, h: float = 1e-4) -> np.ndarray:
    """Relative residual ``|d/dt (m, E) - rhs| / (1 + |rhs|)`` of a closed form.

    Time derivatives use a five-point central stencil.
    """
    t = np.asarray(t, dtype=float)

    def deriv(f):
        return (-f(t + 2 * h) + 8 * f(t + h) - 8 * f(t - h) + f(t - 2 * h)) / (12 * h)

    m, E = cf.m(t) + 0 * t, cf.E(t) + 0 * t
    fm, fE = _rhs_array(sys, m, E)
    rm = np.abs(deriv(cf.m) - fm) / (1 + np.abs(fm))
    rE = np.abs(deriv(cf.E) - fE) / (1 + np.abs(fE))
    return np.maximum(rm, rE)


# -------------------------------------------------------------- grids ---

def vector_field_grid(sys: ScalarMomentSystem, m_range, E_range, n: int):
    """``n x n`` uniform samples of the vector field: arrays ``(m, E, dm, dE)``."""
    if n < 1:
        raise ConfigurationError("grid size must be positive")
    m, E = np.meshgrid(np.linspace(*m_range, n), np.linspace(*E_range, n), indexing="ij")
    dm, dE = _rhs_array(sys, m, E)
    return m, E, dm, dE


def write_grid_csv(path, grid):
    m, E, dm, dE = (np.ravel(a) for a in grid)
    return write_csv(path, ("m", "E", "dm", "dE"), zip(m, E, dm, dE))


def write_trajectory_csv(path, traj: Trajectory, start_id: int = 0):
    rows = ((start_id, t, m, E) for t, m, E in zip(traj.t, traj.m, traj.E))
    return write_csv(path, ("start", "t", "m", "E"), rows)


def write_nullclines_csv(path, sys, m_range, E_range, n: int = 200):
    rows = []
    for nc in nullclines(sys):
        for m, E in nc.sample(m_range, n, E_range):
            rows.append((nc.name, nc.component, m, E))
    return write_csv(path, ("branch", "component", "m", "E"), rows)


def write_fixed_points_csv(path, points: Sequence[FixedPoint]):
    rows = []
    for fp in points:
        mu1, mu2 = fp.eigenvalues
        rows.append((fp.label, fp.point.m, fp.point.E, fp.classification,
                     int(fp.point.admissible), mu1.real, mu1.imag, mu2.real, mu2.imag))
    return write_csv(path, ("label", "m", "E", "classification", "admissible",
                            "mu1_re", "mu1_im", "mu2_re", "mu2_im"), rows)


# ------------------------------------------------------- d-dimensional ---

def ddim_moment_rhs(model: LinearModel, noise: NoiseModel, y, state, *,
                    lambda2: float = 0.0, Lambda=None):
    """``(dm/dt, dE/dt)`` of the moment system for a linear model.

    ``state`` is either a particle ensemble, in which case the second-moment
    integral is the average over particles, or a :class:`MomentState`, for
    which the integral is evaluated in closed form (the model is linear).
    The injected-noise source adds ``Lambda`` (default ``lambda2 I``).
    """
    if not model.is_linear:
        raise ConfigurationError("moment equations are available for linear models only")
    y = np.asarray(y, dtype=float)
    if isinstance(state, MomentState):
        mom = state
        C = mom.covariance
        grad_m = gradient_phi_batch(model, noise, y, mom.m[None, :])[0]
        # mean over f of grad Phi(u) u^T = G^T Gamma (G E - y m^T)
        GE = model.apply_batch(mom.E.T).T  # G E, columns
        Gy = model.apply_transpose_batch(noise.weight(y)[None, :])[0]
        A = model.apply_transpose_batch(noise.weight(GE.T)).T - np.outer(Gy, mom.m)
        T = C @ A
    else:
        U = as_members(state)
        mom = empirical_moments(U)
        C = mom.covariance
        grads = gradient_phi_batch(model, noise, y, U)
        grad_m = gradient_phi_batch(model, noise, y, mom.m[None, :])[0]
        T = C @ (grads.T @ U) / U.shape[0]
    dm = -C @ grad_m
    dE = -(T + T.T)
    d = dm.shape[0]
    if Lambda is not None:
        dE = dE + np.asarray(Lambda, dtype=float)
    elif lambda2:
        dE = dE + lambda2 * np.eye(d)
    return dm, dE


def integrate_ddim_moments(model: LinearModel, noise: NoiseModel, y, moments0: MomentState,
                           t_eval, *, lambda2: float = 0.0, tol: float = 1e-10):
    """Integrate the closed d-dimensional moment system; returns ``(m(t), E(t))`` arrays."""
    d = moments0.d
    t_eval = np.asarray(t_eval, dtype=float)

    def f(t, z):
        m = z[:d]
        E = z[d:].reshape(d, d)
        dm, dE = ddim_moment_rhs(model, noise, y, MomentState(m, 0.5 * (E + E.T)),
                                 lambda2=lambda2)
        return np.concatenate([dm, dE.ravel()])

    z0 = np.concatenate([moments0.m, moments0.E.ravel()])
    res = solve_ivp(f, (0.0, float(t_eval[-1])), z0, method="DOP853", rtol=tol, atol=tol,
                    t_eval=t_eval)
    if not res.success:
        raise ArithmeticError(res.message)
    return res.y[:d].T, res.y[d:].T.reshape(-1, d, d)
