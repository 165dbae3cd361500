"""Benchmark inverse problems: 1-D linear elliptic source identification and
the two-parameter nonlinear elliptic problem.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded
from scipy.sparse.linalg import LinearOperator

from .ensemble import Ensemble
from .errors import ConfigurationError
from .problem import LinearModel, NoiseModel, NonlinearModel, Observation

__all__ = [
    "InverseProblem",
    "EllipticLinearProblem",
    "NonlinearEllipticProblem",
    "elliptic_operator",
    "build_linear_elliptic",
    "brownian_bridge_covariance",
    "sample_brownian_bridge_prior",
    "build_nonlinear_problem",
    "sample_nonlinear_prior",
    "nonlinear_forward",
    "build_problem",
    "PROBLEM_NAMES",
]

NONLINEAR_DATA = (27.5, 79.7)
NONLINEAR_POINTS = (0.25, 0.75)
NONLINEAR_GAMMA = 0.1
#: Reference posterior mean of the nonlinear problem (from Bayes' formula).
NONLINEAR_POSTERIOR_MEAN = (-2.65, 104.5)


@dataclass
class InverseProblem:
    """Forward model, noise model, data and prior of one experiment."""

    name: str
    model: Union[LinearModel, NonlinearModel]
    noise: NoiseModel
    observation: Observation
    prior: Callable[[int, int], Ensemble]
    gamma_scalar: float
    threshold: Optional[float] = None
    params: dict = field(default_factory=dict)

    @property
    def y(self) -> np.ndarray:
        return self.observation.y

    @property
    def u_true(self) -> Optional[np.ndarray]:
        return self.observation.u_true

    def discrepancy_threshold(self, norm: str = "euclidean") -> float:
        """Stopping level for the misfit.

        ``norm="euclidean"`` gives ``|eta|_2^2`` of the stored noise draw,
        ``norm="weighted"`` gives ``eta^T Gamma eta``. Without a stored draw
        the expected values ``tr(Gamma^-1)`` and ``K`` are used. An explicit
        ``threshold`` takes precedence over both.
        """
        if self.threshold is not None:
            return float(self.threshold)
        eta = self.observation.eta
        if norm == "euclidean":
            return float(eta @ eta) if eta is not None else float(np.trace(self.noise.covariance))
        if norm == "weighted":
            return float(self.noise.norm2(eta)) if eta is not None else float(self.noise.K)
        raise ConfigurationError(f"unknown threshold norm {norm!r}")

    def sample_prior(self, J: int, seed: int) -> Ensemble:
        return self.prior(J, seed)


# ---------------------------------------------------------------- linear ---

def elliptic_operator(n: int) -> LinearOperator:
    """Solution operator of ``-p'' + p = u`` on ``[0, pi]``, ``p(0)=p(pi)=0``.

    Second-order central differences on the ``n`` interior nodes
    ``x_i = i pi / (n + 1)``; applied through a cached banded Cholesky
    factor, so the dense inverse is never formed.
    """
    if n < 4:
        raise ConfigurationError("elliptic grid needs n >= 4")
    h = np.pi / (n + 1)
    ab = np.empty((2, n))
    ab[0, :] = -1.0 / h**2
    ab[1, :] = 2.0 / h**2 + 1.0
    factor = cholesky_banded(ab, lower=False)

    def solve(X):
        X = np.asarray(X, dtype=float)
        return cho_solve_banded((factor, False), X)

    return LinearOperator(
        (n, n), matvec=solve, rmatvec=solve, matmat=solve, rmatmat=solve, dtype=float
    )


def elliptic_mesh(n: int) -> np.ndarray:
    return np.pi * np.arange(1, n + 1) / (n + 1)


PROFILES = {
    "one": lambda x: np.ones_like(x),
    "sin8": lambda x: np.sin(8.0 * x),
    "sin": np.sin,
}


@dataclass
class EllipticLinearProblem(InverseProblem):
    mesh: np.ndarray = None

    def full_mesh(self) -> np.ndarray:
        """Mesh including the two Dirichlet boundary nodes."""
        return np.concatenate([[0.0], self.mesh, [np.pi]])

    def extend(self, v) -> np.ndarray:
        """Pad interior nodal values with the zero boundary values."""
        v = np.asarray(v, dtype=float)
        pad = [(0, 0)] * (v.ndim - 1) + [(1, 1)]
        return np.pad(v, pad)


def brownian_bridge_covariance(x: np.ndarray, length: float = np.pi) -> np.ndarray:
    """``min(s, t) - s t / L`` on the given points."""
    x = np.asarray(x, dtype=float)
    return np.minimum.outer(x, x) - np.outer(x, x) / length


def sample_brownian_bridge_prior(n: int, J: int, seed: int, *, cov=None) -> Ensemble:
    """J draws of a standard Brownian bridge on ``[0, pi]`` at the interior nodes.

    ``cov`` replaces the bridge covariance by any SPD ``(n, n)`` matrix.
    """
    if n < 2:
        raise ConfigurationError("prior grid needs n >= 2")
    C0 = brownian_bridge_covariance(elliptic_mesh(n)) if cov is None else np.asarray(cov, float)
    L = np.linalg.cholesky(C0)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((J, n))
    return Ensemble(z @ L.T)


def build_linear_elliptic(n: int = 256, u_profile="one", gamma: float = 0.01,
                          seed: int = 0, name: str = "elliptic") -> EllipticLinearProblem:
    """Synthesize ``y = G u_true + eta`` with ``eta ~ N(0, gamma^2 I)``.

    ``u_profile`` is ``"one"``, ``"sin8"``, ``"sin"``, a callable of ``x`` or
    an array of nodal values.
    """
    mesh = elliptic_mesh(n)
    if isinstance(u_profile, str):
        try:
            u_true = PROFILES[u_profile](mesh)
        except KeyError:
            raise ConfigurationError(f"unknown control profile {u_profile!r}") from None
    elif callable(u_profile):
        u_true = np.asarray(u_profile(mesh), dtype=float)
    else:
        u_true = np.asarray(u_profile, dtype=float)
    if u_true.shape != (n,):
        raise ConfigurationError("control profile must give one value per node")
    model = LinearModel(elliptic_operator(n))
    noise = NoiseModel.isotropic(gamma, n)
    rng = np.random.default_rng(seed)
    eta = gamma * rng.standard_normal(n)
    y = model.apply(u_true) + eta
    obs = Observation(y=y, eta=eta, u_true=u_true)
    return EllipticLinearProblem(
        name=name,
        model=model,
        noise=noise,
        observation=obs,
        prior=lambda J, s: sample_brownian_bridge_prior(n, J, s),
        gamma_scalar=gamma,
        params={"n": n, "gamma": gamma, "seed": seed,
                "profile": u_profile if isinstance(u_profile, str) else "custom"},
        mesh=mesh,
    )


# ------------------------------------------------------------- nonlinear ---

def nonlinear_forward(U) -> np.ndarray:
    """``p(x) = u2 x + exp(-u1) (x/2 - x^2/2)`` at the two observation points."""
    U = np.asarray(U, dtype=float)
    x = np.asarray(NONLINEAR_POINTS)
    u1 = U[..., 0:1]
    u2 = U[..., 1:2]
    return u2 * x + np.exp(-u1) * (0.5 * x - 0.5 * x**2)


@dataclass
class NonlinearEllipticProblem(InverseProblem):
    reference_mean: tuple = NONLINEAR_POSTERIOR_MEAN


def sample_nonlinear_prior(J: int, seed: int) -> Ensemble:
    """``u1 ~ N(0, 1)`` and ``u2 ~ U(90, 110)``, independent."""
    rng = np.random.default_rng(seed)
    u1 = rng.standard_normal(J)
    u2 = rng.uniform(90.0, 110.0, J)
    return Ensemble(np.column_stack([u1, u2]))


def build_nonlinear_problem(threshold: Optional[float] = None) -> NonlinearEllipticProblem:
    """Two-parameter problem with the reference data ``y = (27.5, 79.7)``.

    No noise draw is attached to the data, so unless ``threshold`` is given
    the stopping level is the expected noise energy.
    """
    model = NonlinearModel(nonlinear_forward, d=2, K=2, batch=nonlinear_forward)
    noise = NoiseModel.isotropic(NONLINEAR_GAMMA, 2)
    return NonlinearEllipticProblem(
        name="nonlinear-2d",
        model=model,
        noise=noise,
        observation=Observation(y=np.array(NONLINEAR_DATA)),
        prior=sample_nonlinear_prior,
        gamma_scalar=NONLINEAR_GAMMA,
        threshold=threshold,
        params={"threshold": threshold},
    )


PROBLEM_NAMES = ("elliptic-tc1", "elliptic-tc2", "nonlinear-2d")


def build_problem(name: str, *, n: int = 256, gamma: Optional[float] = None,
                  profile: Optional[str] = None, seed: int = 0,
                  threshold: Optional[float] = None) -> InverseProblem:
    """Construct a benchmark problem by its CLI name."""
    if name == "elliptic-tc1":
        prob = build_linear_elliptic(n, profile or "one", 0.01 if gamma is None else gamma,
                                     seed, name=name)
    elif name == "elliptic-tc2":
        prob = build_linear_elliptic(n, profile or "sin8", 0.01 if gamma is None else gamma,
                                     seed, name=name)
    elif name == "nonlinear-2d":
        return build_nonlinear_problem(threshold)
    else:
        raise ConfigurationError(f"unknown problem {name!r}; expected one of {PROBLEM_NAMES}")
    prob.threshold = threshold
    return prob
