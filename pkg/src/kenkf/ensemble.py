"""Ensembles, empirical moments, covariance operators and EnKF updates.

Covariances use the 1/J normalization throughout.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import ConfigurationError, UnsupportedOperation
from .fileio import read_csv, write_csv
from .problem import ForwardModel, NoiseModel, gradient_phi_batch

__all__ = [
    "Ensemble",
    "MomentState",
    "Sigma",
    "as_members",
    "empirical_moments",
    "covariance_cu",
    "covariance_du",
    "discrete_enkf_step",
    "gradient_flow_drift",
    "residual_drift",
    "euler_step",
    "integrate_gradient_flow",
    "write_ensemble_csv",
    "read_ensemble_csv",
]


class Sigma(enum.Enum):
    """Covariance of the data perturbation in the discrete EnKF."""

    ZERO = "zero"
    GAMMA_INVERSE = "gamma_inverse"


class Ensemble:
    """J control vectors in R^d stored as the rows of ``members``."""

    __slots__ = ("members",)

    def __init__(self, members):
        members = np.array(members, dtype=float, copy=True)
        if members.ndim == 1:
            members = members[:, None]
        if members.ndim != 2:
            raise ConfigurationError("ensemble members must form a (J, d) array")
        if members.shape[0] < 2:
            raise ConfigurationError("an ensemble needs at least J = 2 members")
        members.setflags(write=False)
        self.members = members

    @property
    def J(self) -> int:
        return self.members.shape[0]

    @property
    def d(self) -> int:
        return self.members.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    def deviations(self) -> np.ndarray:
        return self.members - self.mean

    def __len__(self):
        return self.J

    def __array__(self, dtype=None, copy=None):
        return self.members if dtype is None else self.members.astype(dtype)

    def __repr__(self):
        return f"Ensemble(J={self.J}, d={self.d})"


def as_members(ens) -> np.ndarray:
    """``(J, d)`` float array view of an Ensemble or array-like."""
    if isinstance(ens, Ensemble):
        return ens.members
    arr = np.asarray(ens, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


@dataclass(frozen=True)
class MomentState:
    """First moment ``m`` and second moment ``E`` of a particle distribution."""

    m: np.ndarray
    E: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        """``E - m m^T``."""
        return self.E - np.outer(self.m, self.m)

    @property
    def d(self) -> int:
        return self.m.shape[0]


def empirical_moments(ens) -> MomentState:
    """Moments of the empirical measure of the ensemble."""
    U = as_members(ens)
    J = U.shape[0]
    if J < 2:
        raise ConfigurationError("moments need at least J = 2 members")
    m = U.mean(axis=0)
    E = U.T @ U / J
    return MomentState(m=m, E=0.5 * (E + E.T))


def _centered(U, model):
    GU = model.apply_batch(U)
    return U - U.mean(axis=0), GU - GU.mean(axis=0), GU


def covariance_cu(ens, model: ForwardModel) -> np.ndarray:
    """Cross covariance ``C(U)`` of controls and model outputs, shape (d, K)."""
    U = as_members(ens)
    dU, dG, _ = _centered(U, model)
    return dU.T @ dG / U.shape[0]


def covariance_du(ens, model: ForwardModel) -> np.ndarray:
    """Output covariance ``D(U)``, shape (K, K), symmetric by construction."""
    U = as_members(ens)
    _, dG, _ = _centered(U, model)
    D = dG.T @ dG / U.shape[0]
    return 0.5 * (D + D.T)


def discrete_enkf_step(ens, model, noise: NoiseModel, y, dt: float,
                       sigma: Sigma = Sigma.ZERO, rng=None) -> Ensemble:
    """One iteration of the perturbed-observation EnKF with step ``dt``.

    ``u_j <- u_j + C (D + Gamma^{-1}/dt)^{-1} (y + xi_j - G(u_j))`` with
    ``xi_j ~ N(0, Sigma/dt)``.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    sigma = Sigma(sigma)
    U = as_members(ens)
    J = U.shape[0]
    y = np.asarray(y, dtype=float)
    dU, dG, GU = _centered(U, model)
    C = dU.T @ dG / J
    D = dG.T @ dG / J
    S = 0.5 * (D + D.T) + noise.covariance / dt
    try:
        factor = cho_factor(S)
    except LinAlgError as exc:
        raise ArithmeticError("D + Gamma^-1/dt is not positive definite") from exc
    innov = y[None, :] - GU
    if sigma is Sigma.GAMMA_INVERSE:
        if rng is None:
            raise ConfigurationError("a random generator is required for Sigma = Gamma^-1")
        z = rng.standard_normal(innov.shape)
        innov = innov + (z @ noise.covariance_sqrt) / np.sqrt(dt)
    return Ensemble(U + cho_solve(factor, innov.T).T @ C.T)


def gradient_flow_drift(ens, model, noise: NoiseModel, y) -> np.ndarray:
    """Preconditioned gradient drift ``-Cov(U) grad Phi(u_j)`` per member."""
    if not model.is_linear:
        raise UnsupportedOperation("gradient-flow drift needs a linear model; use residual_drift")
    U = as_members(ens)
    dU = U - U.mean(axis=0)
    grads = gradient_phi_batch(model, noise, y, U)
    J, d = dU.shape
    if J <= d:
        # Cov g = (1/J) sum_k dU_k (dU_k . g)
        return -(grads @ dU.T) @ dU / J
    cov = dU.T @ dU / J
    return -grads @ cov


def residual_drift(ens, model, noise: NoiseModel, y) -> np.ndarray:
    """Derivative-free drift ``C(U) Gamma (y - G(u_j))`` per member."""
    U = as_members(ens)
    dU, dG, GU = _centered(U, model)
    W = noise.weight(np.asarray(y, dtype=float)[None, :] - GU)
    J = U.shape[0]
    if J <= max(U.shape[1], GU.shape[1]):
        return (W @ dG.T) @ dU / J
    return W @ (dU.T @ dG / J).T


def euler_step(ens, model, noise: NoiseModel, y, dt: float, *, drift: str = "residual",
               sigma: Sigma = Sigma.ZERO, rng=None) -> Ensemble:
    """Explicit Euler(-Maruyama) step of the continuous-time EnKF dynamics.

    With ``sigma=GAMMA_INVERSE`` the additive term
    ``sqrt(dt) C(U) Gamma Gamma^{-1/2} xi`` is included (residual drift only).
    """
    U = as_members(ens)
    sigma = Sigma(sigma)
    if drift == "residual":
        F = residual_drift(U, model, noise, y)
    elif drift == "gradient":
        F = gradient_flow_drift(U, model, noise, y)
    else:
        raise ConfigurationError(f"unknown drift {drift!r}")
    new = U + dt * F
    if sigma is Sigma.GAMMA_INVERSE:
        if drift != "residual":
            raise ConfigurationError("noisy Euler steps use the residual drift")
        if rng is None:
            raise ConfigurationError("a random generator is required for Sigma = Gamma^-1")
        C = covariance_cu(U, model)
        z = rng.standard_normal((U.shape[0], model.K))
        kick = noise.weight(z @ noise.covariance_sqrt) @ C.T
        new = new + np.sqrt(dt) * kick
    return Ensemble(new)


def integrate_gradient_flow(ens, model, noise: NoiseModel, y, t_out, *, cfl: float = 0.1,
                            max_steps: int = 1_000_000):
    """Classical RK4 for ``du_j/dt = -Cov(U) grad Phi(u_j)`` with adaptive steps.

    The step is ``cfl / rho(Cov G^T Gamma G)`` of the current ensemble, shortened
    to land exactly on every time in the increasing sequence ``t_out``.
    Returns the list of ensembles (as arrays) at ``t_out``.
    """
    from .meanfield import spectral_radius

    U = np.array(as_members(ens), dtype=float)
    t_out = np.asarray(t_out, dtype=float)
    if np.any(np.diff(t_out) < 0) or (t_out.size and t_out[0] < 0):
        raise ConfigurationError("output times must be non-negative and increasing")
    f = lambda X: gradient_flow_drift(X, model, noise, y)
    t, steps, out = 0.0, 0, []
    for target in t_out:
        while t < target:
            rho = spectral_radius(U, model, noise)
            h = target - t if rho == 0.0 else min(cfl / rho, target - t)
            k1 = f(U)
            k2 = f(U + 0.5 * h * k1)
            k3 = f(U + 0.5 * h * k2)
            k4 = f(U + h * k3)
            U = U + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            t = target if h == target - t else t + h
            steps += 1
            if steps > max_steps:
                raise ArithmeticError("gradient-flow integration exceeded max_steps")
        out.append(U.copy())
    return out


def write_ensemble_csv(path, ens):
    U = as_members(ens)
    header = [f"u{i}" for i in range(U.shape[1])]
    return write_csv(path, header, U.tolist())


def read_ensemble_csv(path) -> Ensemble:
    _, rows = read_csv(path)
    return Ensemble(np.array(rows, dtype=float))
