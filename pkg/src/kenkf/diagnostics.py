"""Per-iteration quality metrics, the discrepancy stopping rule and the
ensemble-collapse rate estimator.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .ensemble import as_members
from .errors import ConfigurationError
from .fileio import write_csv
from .problem import ForwardModel, NoiseModel

__all__ = [
    "DiagnosticsRecord",
    "TRACE_COLUMNS",
    "weighted_inner",
    "deviations",
    "norm_summaries",
    "NormSummary",
    "misfit",
    "discrepancy_stop",
    "collapse_matrix",
    "collapse_norm",
    "CollapseFit",
    "collapse_rate",
    "write_trace_csv",
]

TRACE_COLUMNS = ("t", "eps", "v", "r", "V", "R", "misfit", "rho")


@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    eps: float
    v: float
    r: float
    V: float
    R: float
    misfit: float
    rho: float
    V_lin: float = float("nan")
    R_lin: float = float("nan")

    def row(self):
        return [getattr(self, c) for c in TRACE_COLUMNS]

    def as_dict(self):
        return asdict(self)


def weighted_inner(A, B, noise: NoiseModel, weight: str = "precision") -> np.ndarray:
    """Gram matrix of weighted inner products between the rows of A and B.

    ``weight="precision"`` gives ``a^T Gamma b`` (the ``Gamma^{-1}``-subscripted
    product of the misfit definitions); ``weight="covariance"`` gives
    ``a^T Gamma^{-1} b`` (the ``Gamma``-subscripted product).
    """
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if weight == "precision":
        return noise.weight(A) @ B.T
    if weight == "covariance":
        return A @ noise.covariance @ B.T
    raise ConfigurationError(f"unknown weighting {weight!r}")


def deviations(ens, u_truth) -> Tuple[np.ndarray, np.ndarray]:
    """``v_j = u_j - mean`` and ``r_j = u_j - u_truth`` for every member."""
    U = as_members(ens)
    return U - U.mean(axis=0), U - np.asarray(u_truth, dtype=float)


@dataclass(frozen=True)
class NormSummary:
    """``(v, r, V, R)`` plus the unsquared diagonal sums ``V_lin``, ``R_lin``.

    Unpacks as the four-tuple ``v, r, V, R``.
    """

    v: float
    r: float
    V: float
    R: float
    V_lin: float
    R_lin: float

    def __iter__(self):
        return iter((self.v, self.r, self.V, self.R))


def _summaries(dev_v, dev_r, Gv, Gr, noise) -> NormSummary:
    Vjj = noise.norm2(Gv)
    Rjj = noise.norm2(Gr)
    return NormSummary(
        v=float(np.mean(np.einsum("jd,jd->j", dev_v, dev_v))),
        r=float(np.mean(np.einsum("jd,jd->j", dev_r, dev_r))),
        V=float(np.mean(Vjj**2)),
        R=float(np.mean(Rjj**2)),
        V_lin=float(np.mean(Vjj)),
        R_lin=float(np.mean(Rjj)),
    )


def norm_summaries(ens, model: ForwardModel, noise: NoiseModel, u_truth) -> NormSummary:
    """Mean squared deviations and the projected diagonal summaries.

    ``V = (1/J) sum_j |V_jj|^2`` with ``V_jj = |G v_j|^2_Gamma`` (and likewise R).
    For nonlinear models ``G v_j`` is replaced by ``G(u_j) - G(mean)``.
    """
    U = as_members(ens)
    u_truth = np.asarray(u_truth, dtype=float)
    dv, dr = deviations(U, u_truth)
    if model.is_linear:
        Gv = model.apply_batch(dv)
        Gr = model.apply_batch(dr)
    else:
        GU = model.apply_batch(U)
        Gv = GU - model.apply(U.mean(axis=0))
        Gr = GU - model.apply(u_truth)
    return _summaries(dv, dr, Gv, Gr, noise)


def misfit(ens, model: ForwardModel, noise: NoiseModel, *, y=None, eta=None,
           u_truth=None) -> float:
    """Ensemble-averaged weighted misfit ``(1/J) sum_j |theta_j|^2_{Gamma^-1}``.

    With a linear model, ``u_truth`` and ``eta`` the residual is
    ``theta_j = G r_j - eta``; otherwise ``theta_j = G(u_j) - y``.
    """
    U = as_members(ens)
    if model.is_linear and u_truth is not None and eta is not None:
        theta = model.apply_batch(U - np.asarray(u_truth, dtype=float)) - np.asarray(eta)
    elif y is not None:
        theta = model.apply_batch(U) - np.asarray(y, dtype=float)
    else:
        raise ConfigurationError("misfit needs the data y, or u_truth and eta")
    return float(np.mean(noise.norm2(theta)))


def discrepancy_stop(misfit_value: float, eta) -> bool:
    """True when ``misfit <= |eta|_2^2``; ``eta`` may be the noise draw or the threshold."""
    eta = np.asarray(eta, dtype=float)
    threshold = float(eta) if eta.ndim == 0 else float(eta @ eta)
    return bool(misfit_value <= threshold)


def state_record(U, GU, model, noise, y, *, t, eps, rho, eta=None, u_truth=None,
                 reference=None) -> DiagnosticsRecord:
    """Diagnostics for one iteration, reusing precomputed model outputs ``GU``."""
    y = np.asarray(y, dtype=float)
    ubar = U.mean(axis=0)
    target = u_truth if u_truth is not None else reference
    dv = U - ubar
    if model.is_linear:
        Gv = GU - GU.mean(axis=0)
    else:
        Gv = GU - model.apply(ubar)
    if target is not None:
        target = np.asarray(target, dtype=float)
        dr = U - target
        Gtarget = model.apply(target)
        Gr = GU - Gtarget
        if model.is_linear and eta is not None and u_truth is not None:
            theta = Gr - eta
        else:
            theta = GU - y
    else:
        dr = np.full_like(U, np.nan)
        Gr = np.full_like(GU, np.nan)
        theta = GU - y
    s = _summaries(dv, dr, Gv, Gr, noise)
    return DiagnosticsRecord(
        t=float(t), eps=float(eps), v=s.v, r=s.r, V=s.V, R=s.R,
        misfit=float(np.mean(noise.norm2(theta))), rho=float(rho),
        V_lin=s.V_lin, R_lin=s.R_lin,
    )


# ---------------------------------------------------------- collapse rate ---

def collapse_matrix(ens, model, noise: NoiseModel) -> np.ndarray:
    """``R_ij = <G(u_i - mean), G(u_j - mean)>_Gamma`` (weight ``Gamma^{-1}``)."""
    U = as_members(ens)
    Gv = model.apply_batch(U - U.mean(axis=0))
    return weighted_inner(Gv, Gv, noise, weight="covariance")


def collapse_norm(ens, model, noise: NoiseModel) -> float:
    """Frobenius norm of :func:`collapse_matrix`, computed in the K x K form."""
    U = as_members(ens)
    Gv = model.apply_batch(U - U.mean(axis=0))
    if Gv.shape[0] <= Gv.shape[1]:
        return float(np.linalg.norm(weighted_inner(Gv, Gv, noise, "covariance")))
    S = noise.covariance_sqrt
    X = Gv @ S
    return float(np.linalg.norm(X.T @ X))


@dataclass
class CollapseFit:
    """Log-log slopes and prefactors of ``|R(t)|`` per ensemble size."""

    slopes: Dict[int, float]
    prefactors: Dict[int, float]
    growth_exponent: float
    collapsed_at_start: Dict[int, bool]

    @property
    def prefactor_nondecreasing(self) -> bool:
        Js = sorted(self.prefactors)
        vals = [self.prefactors[J] for J in Js]
        return all(b >= a for a, b in zip(vals, vals[1:]))


def collapse_rate(traces: Mapping[int, Tuple[Sequence[float], Sequence[float]]],
                  t_range: Tuple[float, float] = (10.0, 1000.0),
                  min_points: int = 3) -> CollapseFit:
    """Fit ``|R(t)| ~ c_J t^s`` on ``t_range`` for each ensemble size J.

    ``traces`` maps J to ``(times, norms)``. The prefactor ``c_J`` is the
    geometric mean of ``|R(t)| t`` over the window, and ``growth_exponent``
    is the slope of ``log c_J`` against ``log J``.
    """
    slopes, prefs, collapsed = {}, {}, {}
    lo, hi = t_range
    for J, (t, Rn) in traces.items():
        t = np.asarray(t, dtype=float)
        Rn = np.asarray(Rn, dtype=float)
        if Rn.size and np.all(Rn == 0.0):
            slopes[J], prefs[J], collapsed[J] = float("nan"), 0.0, True
            continue
        mask = (t >= lo) & (t <= hi) & (Rn > 0)
        if mask.sum() < min_points:
            raise ConfigurationError(
                f"trace for J={J} has {int(mask.sum())} points in {t_range}; need {min_points}"
            )
        lt, lr = np.log(t[mask]), np.log(Rn[mask])
        slopes[J] = float(np.polyfit(lt, lr, 1)[0])
        prefs[J] = float(np.exp(np.mean(lr + lt)))
        collapsed[J] = False
    live = [J for J in prefs if not collapsed[J]]
    if len(live) >= 2:
        growth = float(np.polyfit(np.log(live), np.log([prefs[J] for J in live]), 1)[0])
    else:
        growth = float("nan")
    return CollapseFit(slopes=slopes, prefactors=prefs, growth_exponent=growth,
                       collapsed_at_start=collapsed)


def write_trace_csv(path, records: Sequence[DiagnosticsRecord]):
    return write_csv(path, TRACE_COLUMNS, (rec.row() for rec in records))
