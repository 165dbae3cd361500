"""Mean-field Monte Carlo particle method for ensemble Kalman inversion.

Each iteration every particle interacts with the moments of its own
uniformly drawn M-subsample of the ensemble, optionally receives Gaussian
noise, and moves by an adaptive step ``eps = 1 / rho(Cov G^T Gamma G)``.
All particle updates read the iteration-start ensemble.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import kernels
from ._counter_rng import DOMAIN_SUBSAMPLE, iteration_key, normal_block
from .diagnostics import DiagnosticsRecord, state_record
from .ensemble import Ensemble, MomentState, as_members, empirical_moments, gradient_flow_drift
from .errors import ConfigurationError, NumericDivergence
from .problem import ForwardModel, NoiseModel, gradient_phi, gradient_phi_batch

log = logging.getLogger(__name__)

__all__ = [
    "Stopping",
    "NoiseKind",
    "StopReason",
    "SolverConfig",
    "IterationTrace",
    "stable_epsilon",
    "spectral_radius",
    "interact",
    "subsample_moments",
    "run",
]


class Stopping(str, enum.Enum):
    DISCREPANCY = "discrepancy"
    TIME_ONLY = "time"


class NoiseKind(str, enum.Enum):
    NONE = "none"
    GAUSSIAN = "gaussian"


class StopReason(str, enum.Enum):
    DISCREPANCY_MET = "DiscrepancyMet"
    TIME_REACHED = "TimeReached"
    MAX_ITERATIONS = "MaxIterations"


@dataclass
class SolverConfig:
    """Parameters of one particle run.

    ``Lambda`` overrides the isotropic noise covariance ``lambda2 * I`` when
    given; ``threshold`` overrides the problem's discrepancy level.
    ``threshold_norm`` selects how the noise level is measured: the plain
    Euclidean ``|eta|_2^2`` (default) or the weighted ``eta^T Gamma eta``,
    which is on the same scale as the misfit.
    """

    J: int
    M: Optional[int] = None
    lambda2: float = 0.0
    T_fin: float = math.inf
    n_tot: int = 10_000
    seed: int = 0
    stopping: Stopping = Stopping.DISCREPANCY
    noise_kind: NoiseKind = NoiseKind.NONE
    Lambda: Optional[np.ndarray] = None
    threshold: Optional[float] = None
    threshold_norm: str = "euclidean"

    def __post_init__(self):
        self.J = int(self.J)
        self.M = self.J if self.M is None else int(self.M)
        self.stopping = Stopping(self.stopping)
        self.noise_kind = NoiseKind(self.noise_kind)
        if self.threshold_norm not in ("euclidean", "weighted"):
            raise ConfigurationError("threshold_norm must be 'euclidean' or 'weighted'")
        if self.J < 2:
            raise ConfigurationError("J must be at least 2")
        if not 2 <= self.M <= self.J:
            raise ConfigurationError(f"M must satisfy 2 <= M <= J, got M={self.M}, J={self.J}")
        if not self.T_fin > 0:
            raise ConfigurationError("T_fin must be positive")
        if self.lambda2 < 0:
            raise ConfigurationError("lambda2 must be non-negative")
        if self.n_tot < 0:
            raise ConfigurationError("n_tot must be non-negative")
        if self.Lambda is not None:
            lam = np.atleast_2d(np.asarray(self.Lambda, dtype=float))
            if lam.shape[0] != lam.shape[1] or not np.allclose(lam, lam.T):
                raise ConfigurationError("Lambda must be a symmetric matrix")
            if np.linalg.eigvalsh(lam).min() < -1e-12 * max(1.0, np.abs(lam).max()):
                raise ConfigurationError("Lambda must be positive semi-definite")
            self.Lambda = lam

    def noise_sqrt(self, d: int) -> Optional[np.ndarray]:
        """Symmetric square root of the noise covariance, or None for ``lambda2 * I``."""
        if self.Lambda is None:
            return None
        if self.Lambda.shape != (d, d):
            raise ConfigurationError(f"Lambda must be {d}x{d}")
        w, Q = np.linalg.eigh(self.Lambda)
        return (Q * np.sqrt(np.clip(w, 0.0, None))) @ Q.T

    def to_dict(self) -> dict:
        out = asdict(self)
        out["stopping"] = self.stopping.value
        out["noise_kind"] = self.noise_kind.value
        if self.Lambda is not None:
            out["Lambda"] = self.Lambda.tolist()
        return out


@dataclass
class IterationTrace:
    """Diagnostics of every step taken, the stopping state and the final ensemble.

    ``records`` hold the state at the start of each step with the step size
    used; ``final`` describes the state the run stopped in (``eps = 0``).
    """

    records: List[DiagnosticsRecord]
    final: Optional[DiagnosticsRecord]
    ensemble: Optional[Ensemble]
    stop_reason: Optional[StopReason]
    config: SolverConfig
    backend: str = kernels.BACKEND_NAME
    extra: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def all_records(self) -> List[DiagnosticsRecord]:
        return self.records + ([self.final] if self.final is not None else [])

    @property
    def mean(self) -> np.ndarray:
        return self.ensemble.mean


# ------------------------------------------------------------ step size ---

def _rho_from_covariance(cov: np.ndarray, model, noise: NoiseModel, scale: float) -> float:
    w, Q = np.linalg.eigh(0.5 * (cov + cov.T))
    keep = w > 1e-14 * max(scale, np.finfo(float).tiny)
    if not keep.any():
        return 0.0
    X = model.apply_batch((Q[:, keep] * np.sqrt(w[keep])).T)  # rows: G c_i^{1/2} q_i
    gram = noise.weight(X) @ X.T
    return float(np.linalg.eigvalsh(0.5 * (gram + gram.T))[-1])


def spectral_radius(ens, model: ForwardModel, noise: NoiseModel, GU=None) -> float:
    """``rho(Cov G^T Gamma G)`` for linear models, ``rho(D(U) Gamma)`` otherwise.

    For linear models both expressions coincide.
    """
    U = as_members(ens)
    if model.is_linear:
        mom = empirical_moments(U)
        return _rho_from_covariance(mom.covariance, model, noise, float(np.trace(mom.E)))
    if GU is None:
        GU = model.apply_batch(U)
    dG = GU - GU.mean(axis=0)
    D = dG.T @ dG / U.shape[0]
    S = noise.gamma_sqrt
    scale = float(np.trace(GU.T @ GU) / U.shape[0])
    if np.trace(D) <= 1e-14 * max(scale, np.finfo(float).tiny):
        return 0.0
    return float(np.linalg.eigvalsh(S @ D @ S)[-1])


def stable_epsilon(moments: MomentState, model: ForwardModel, noise: NoiseModel,
                   T_fin: float = math.inf) -> float:
    """Largest stable interaction strength ``1 / rho(Cov G^T Gamma G)``.

    Returns ``T_fin`` when the covariance vanishes (no stability constraint).
    """
    if not model.is_linear:
        raise ConfigurationError("stable_epsilon needs a linear model; use spectral_radius")
    if not (np.all(np.isfinite(moments.m)) and np.all(np.isfinite(moments.E))):
        raise NumericDivergence("non-finite moments")
    rho = _rho_from_covariance(moments.covariance, model, noise, float(np.trace(moments.E)))
    return T_fin if rho == 0.0 else 1.0 / rho


# ---------------------------------------------------------- interaction ---

def interact(u_star, moments_M: MomentState, model: ForwardModel, noise: NoiseModel, y,
             eps: float, xi=None, *, members=None) -> np.ndarray:
    """Post-interaction value of one particle.

    Linear models: ``u* - eps Cov_M grad Phi(u*) + sqrt(eps) xi``.
    Nonlinear models: ``u* + eps C(U_M) Gamma (y - G(u*)) + sqrt(eps) xi``,
    which needs the subsample ``members`` themselves.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    u_star = np.asarray(u_star, dtype=float)
    if model.is_linear:
        step = -moments_M.covariance @ gradient_phi(model, noise, y, u_star)
    else:
        if members is None:
            raise ConfigurationError("nonlinear interaction needs the subsample members")
        S = as_members(members)
        GS = model.apply_batch(S)
        C = (S - S.mean(axis=0)).T @ (GS - GS.mean(axis=0)) / S.shape[0]
        step = C @ noise.weight(np.asarray(y, dtype=float) - model.apply(u_star))
    out = u_star + eps * step
    if xi is not None:
        out = out + math.sqrt(eps) * np.asarray(xi, dtype=float)
    return out


def subsample_moments(ens, M: int, rng) -> MomentState:
    """Moments of M members drawn uniformly without repetition."""
    U = as_members(ens)
    J = U.shape[0]
    if M > J:
        raise ConfigurationError(f"subsample size M={M} exceeds J={J}")
    if M < 2:
        raise ConfigurationError("subsample size must be at least 2")
    sel = np.arange(J) if M == J else rng.choice(J, size=M, replace=False)
    return empirical_moments(U[sel])


def subsample_indices(J: int, M: int, seed: int, iteration: int, particle: int) -> np.ndarray:
    """Indices the solver's kernel selects for ``particle`` at ``iteration``."""
    key = iteration_key(seed, DOMAIN_SUBSAMPLE, iteration)
    return kernels.subsample_indices(J, M, key, particle)


def _drift(U, GU, model, noise, y, M, seed, n, backend_module=None):
    J = U.shape[0]
    if model.is_linear:
        if M == J:
            return gradient_flow_drift(U, model, noise, y)
        W = -gradient_phi_batch(model, noise, y, U)
        B = U
    else:
        W = noise.weight(y[None, :] - GU)
        if M == J:
            dU = U - U.mean(axis=0)
            dG = GU - GU.mean(axis=0)
            return W @ (dU.T @ dG / J).T
        B = GU
    key = iteration_key(seed, DOMAIN_SUBSAMPLE, n)
    return kernels.subsampled_drift(
        np.ascontiguousarray(U), np.ascontiguousarray(B), np.ascontiguousarray(W), M, key,
        backend_module=backend_module,
    )


def run(problem, config: SolverConfig, *, initial=None,
        callback: Optional[Callable[[int, np.ndarray, DiagnosticsRecord], None]] = None,
        backend_module=None) -> IterationTrace:
    """Run the particle method until the discrepancy level, ``T_fin`` or ``n_tot``.

    ``problem`` provides ``model``, ``noise``, ``y``, ``u_true`` (may be None),
    ``observation.eta`` (may be None), ``discrepancy_threshold()`` and
    ``sample_prior(J, seed)``. ``initial`` replaces the prior draw.
    """
    model, noise = problem.model, problem.noise
    y = np.asarray(problem.y, dtype=float)
    u_true = problem.u_true
    eta = problem.observation.eta
    reference = getattr(problem, "reference_mean", None)
    if initial is None:
        U = as_members(problem.sample_prior(config.J, config.seed)).copy()
    else:
        U = np.array(as_members(initial), dtype=float)
        if U.shape[0] != config.J:
            raise ConfigurationError("initial ensemble size differs from config.J")
    if U.shape[1] != model.d:
        raise ConfigurationError("initial ensemble dimension differs from the model")

    threshold = None
    if config.stopping is Stopping.DISCREPANCY:
        threshold = config.threshold if config.threshold is not None \
            else problem.discrepancy_threshold(config.threshold_norm)

    noise_on = config.noise_kind is NoiseKind.GAUSSIAN
    noise_sqrt = config.noise_sqrt(model.d) if noise_on else None
    lam = math.sqrt(config.lambda2)
    J, M = config.J, config.M

    records: List[DiagnosticsRecord] = []
    trace = IterationTrace(records=records, final=None, ensemble=None, stop_reason=None,
                           config=config,
                           backend="compiled" if (backend_module or kernels.backend)
                           is kernels.compiled_backend else "python")
    t = 0.0
    n = 0
    while True:
        GU = model.apply_batch(U)
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(GU))):
            trace.ensemble = None
            raise NumericDivergence(f"non-finite ensemble at iteration {n}", trace=trace)
        rho = spectral_radius(U, model, noise, GU)

        def record(eps):
            return state_record(U, GU, model, noise, y, t=t, eps=eps, rho=rho,
                                eta=eta, u_truth=u_true, reference=reference)

        reason = None
        current = record(0.0)
        if not math.isfinite(current.misfit):
            raise NumericDivergence(f"non-finite misfit at iteration {n}", trace=trace)
        if threshold is not None and current.misfit <= threshold:
            reason = StopReason.DISCREPANCY_MET
        elif t >= config.T_fin:
            reason = StopReason.TIME_REACHED
        elif n > config.n_tot:
            reason = StopReason.MAX_ITERATIONS
        elif rho == 0.0 and not noise_on and not math.isfinite(config.T_fin):
            # stationary: nothing moves for any step length
            reason = StopReason.TIME_REACHED
        if reason is not None:
            trace.final = current
            trace.stop_reason = reason
            trace.ensemble = Ensemble(U)
            log.info("stopped: %s after %d iterations at t=%.6g", reason.value, n, t)
            return trace

        remaining = config.T_fin - t
        eps = remaining if rho == 0.0 else min(1.0 / rho, remaining)
        assert eps * rho <= 1.0 + 1e-12
        rec = record(eps)
        records.append(rec)
        if callback is not None:
            callback(n, U, rec)

        if rho > 0.0:
            U_new = U + eps * _drift(U, GU, model, noise, y, M, config.seed, n, backend_module)
        else:
            U_new = U.copy()
        if noise_on:
            z = normal_block(config.seed, n, J, model.d)
            xi = z * lam if noise_sqrt is None else z @ noise_sqrt
            U_new = U_new + math.sqrt(eps) * xi
        log.debug("iter %d t=%.6g eps=%.3g misfit=%.6g", n, t, eps, rec.misfit)
        U = U_new
        t = t + eps
        n += 1
