"""Forward models, the noise model and the least-squares objective.

The inverse problem is ``y = G(u) + eta`` with ``eta ~ N(0, Gamma^{-1})``.
Throughout the package ``Gamma`` denotes the noise *precision*; the
weighted inner product used for misfits is ``<a, b>_{Gamma^-1} = a^T Gamma b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from .errors import ConfigurationError, UnsupportedOperation

__all__ = [
    "ForwardModel",
    "LinearModel",
    "NonlinearModel",
    "NoiseModel",
    "Observation",
    "apply_forward",
    "least_squares",
    "gradient_phi",
]


class ForwardModel:
    """Common interface of forward maps R^d -> R^K."""

    d: int
    K: int
    is_linear: bool = False

    def __call__(self, u):
        return apply_forward(self, u)

    def apply(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_batch(self, U: np.ndarray) -> np.ndarray:
        """Evaluate the model on every row of ``U`` (shape ``(J, d)``)."""
        U = np.atleast_2d(np.asarray(U, dtype=float))
        if U.shape[1] != self.d:
            raise ConfigurationError(
                f"members have dimension {U.shape[1]}, model expects d={self.d}"
            )
        return np.array([self.apply(u) for u in U]).reshape(len(U), self.K)


class LinearModel(ForwardModel):
    """Linear forward map ``u -> G u``.

    ``G`` may be a dense ``(K, d)`` array or any scipy ``LinearOperator``;
    operators let large discretizations be applied through a factorization
    instead of an explicit matrix.
    """

    is_linear = True

    def __init__(self, G):
        if isinstance(G, LinearOperator):
            self._dense = None
            self.op = G
        else:
            G = np.atleast_2d(np.asarray(G, dtype=float))
            if G.ndim != 2:
                raise ConfigurationError("linear model needs a 2-D matrix")
            self._dense = G
            self.op = aslinearoperator(G)
        self.K, self.d = self.op.shape

    @property
    def matrix(self) -> np.ndarray:
        """Dense ``(K, d)`` matrix (materialized once for operators)."""
        if self._dense is None:
            self._dense = self.op.matmat(np.eye(self.d))
        return self._dense

    def apply(self, u):
        return np.asarray(self.op.matvec(u), dtype=float).reshape(self.K)

    def apply_batch(self, U):
        U = np.atleast_2d(np.asarray(U, dtype=float))
        if U.shape[1] != self.d:
            raise ConfigurationError(
                f"members have dimension {U.shape[1]}, model expects d={self.d}"
            )
        if self._dense is not None:
            return U @ self._dense.T
        return np.asarray(self.op.matmat(U.T)).T.reshape(len(U), self.K)

    def apply_transpose_batch(self, Y: np.ndarray) -> np.ndarray:
        """Rows of ``Y @ G`` i.e. ``G^T y`` for every row ``y`` of ``Y``."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if self._dense is not None:
            return Y @ self._dense
        return np.asarray(self.op.rmatmat(Y.T)).T.reshape(len(Y), self.d)

    def __repr__(self):
        return f"LinearModel(K={self.K}, d={self.d})"


class NonlinearModel(ForwardModel):
    """Nonlinear forward map given as a callable plus its dimensions.

    ``batch`` is an optional vectorized version of ``func`` acting on
    ``(J, d)`` arrays; it must agree with ``func`` row by row.
    """

    def __init__(self, func: Callable, d: int, K: int, batch: Optional[Callable] = None):
        self.func = func
        self.batch = batch
        self.d = int(d)
        self.K = int(K)

    def apply(self, u):
        return np.asarray(self.func(u), dtype=float).reshape(self.K)

    def apply_batch(self, U):
        U = np.atleast_2d(np.asarray(U, dtype=float))
        if U.shape[1] != self.d:
            raise ConfigurationError(
                f"members have dimension {U.shape[1]}, model expects d={self.d}"
            )
        if self.batch is not None:
            return np.asarray(self.batch(U), dtype=float).reshape(len(U), self.K)
        return super().apply_batch(U)

    def __repr__(self):
        return f"NonlinearModel(K={self.K}, d={self.d})"


class NoiseModel:
    """Gaussian observation noise described by its precision matrix Gamma.

    The symmetric square root ``gamma_sqrt`` (``S^T S = Gamma``) is computed
    once from an eigendecomposition.
    """

    def __init__(self, gamma):
        gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
        if gamma.ndim != 2 or gamma.shape[0] != gamma.shape[1]:
            raise ConfigurationError("noise precision must be a square matrix")
        scale = max(np.abs(gamma).max(), 1.0)
        if not np.allclose(gamma, gamma.T, rtol=0.0, atol=1e-12 * scale):
            raise ConfigurationError("noise precision must be symmetric")
        gamma = 0.5 * (gamma + gamma.T)
        evals, evecs = np.linalg.eigh(gamma)
        if evals.min() <= 0.0:
            raise ConfigurationError("noise precision must be positive definite")
        self.gamma = gamma
        self.K = gamma.shape[0]
        self._evals = evals
        self._evecs = evecs
        off = gamma - np.diag(np.diag(gamma))
        self.is_diagonal = not off.any()
        self._diag = np.diag(gamma).copy()
        self.gamma_sqrt = (evecs * np.sqrt(evals)) @ evecs.T

    @classmethod
    def isotropic(cls, std: float, K: int) -> "NoiseModel":
        """White noise ``N(0, std^2 I)``, i.e. precision ``std^-2 I``."""
        if std <= 0:
            raise ConfigurationError("noise standard deviation must be positive")
        return cls(np.eye(K) / std**2)

    @property
    def covariance(self) -> np.ndarray:
        """Gamma^{-1}."""
        return (self._evecs / self._evals) @ self._evecs.T

    @property
    def covariance_sqrt(self) -> np.ndarray:
        """Symmetric square root of Gamma^{-1}."""
        return (self._evecs / np.sqrt(self._evals)) @ self._evecs.T

    def weight(self, R: np.ndarray) -> np.ndarray:
        """Apply Gamma to the last axis of ``R``."""
        if self.is_diagonal:
            return R * self._diag
        return R @ self.gamma

    def norm2(self, R: np.ndarray) -> np.ndarray:
        """Squared weighted norm ``r^T Gamma r`` along the last axis."""
        return np.einsum("...k,...k->...", R, self.weight(R))

    def __repr__(self):
        return f"NoiseModel(K={self.K}, diagonal={self.is_diagonal})"


@dataclass
class Observation:
    """Observed data and, for synthetic problems, the noise draw behind it."""

    y: np.ndarray
    eta: Optional[np.ndarray] = None
    u_true: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.eta is not None:
            self.eta = np.asarray(self.eta, dtype=float).ravel()
            if self.eta.shape != self.y.shape:
                raise ConfigurationError("noise realization and data differ in length")
        if self.u_true is not None:
            self.u_true = np.asarray(self.u_true, dtype=float).ravel()


def _as_vector(u, n, what):
    u = np.asarray(u, dtype=float).ravel()
    if u.shape[0] != n:
        raise ConfigurationError(f"{what} has length {u.shape[0]}, expected {n}")
    return u


def apply_forward(model: ForwardModel, u) -> np.ndarray:
    """Evaluate the forward map on a single control vector."""
    u = _as_vector(u, model.d, "control")
    return model.apply(u)


def least_squares(model: ForwardModel, noise: NoiseModel, y, u) -> float:
    """``Phi(u, y) = 1/2 |Gamma^{1/2} (y - G(u))|^2``."""
    y = _as_vector(y, model.K, "data")
    if noise.K != model.K:
        raise ConfigurationError("noise model and forward model disagree on K")
    r = noise.gamma_sqrt @ (y - apply_forward(model, u))
    return 0.5 * float(r @ r)


def gradient_phi(model: ForwardModel, noise: NoiseModel, y, u) -> np.ndarray:
    """Gradient ``-G^T Gamma (y - G u)`` of the objective for linear models."""
    if not model.is_linear:
        raise UnsupportedOperation(
            "gradient of the objective is only available for linear models"
        )
    y = _as_vector(y, model.K, "data")
    u = _as_vector(u, model.d, "control")
    w = noise.weight(y - model.apply(u))
    return -model.apply_transpose_batch(w[None, :])[0]


def gradient_phi_batch(model: LinearModel, noise: NoiseModel, y, U) -> np.ndarray:
    """Row-wise objective gradients for a ``(J, d)`` array of controls."""
    if not model.is_linear:
        raise UnsupportedOperation(
            "gradient of the objective is only available for linear models"
        )
    W = noise.weight(np.asarray(y, dtype=float)[None, :] - model.apply_batch(U))
    return -model.apply_transpose_batch(W)
