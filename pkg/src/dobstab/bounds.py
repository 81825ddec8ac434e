"""Workspace constants for the stability bounds.

Every constant is a grid extremum over a :class:`WorkspaceBox`, polished by
a bounded local search started from the best few grid points so that
off-grid configurations do not exceed it. ``M`` and ``C`` of a planar arm do
not depend on the first joint angle, so those searches run over joints
2..n only; gravity uses the full box.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from dobstab.controller import ControllerConfig
from dobstab.dynamics import ConfigurationError, ManipulatorModel

DOMINANT = "dominant"
DOMINATED = "dominated"
INDEFINITE = "indefinite"


class BandwidthWarning(UserWarning):
    pass


@dataclass(frozen=True)
class WorkspaceBox:
    q_min: tuple[float, ...]
    q_max: tuple[float, ...]
    qdot_max: tuple[float, ...]
    grid_points_per_dim: int = 25

    def __post_init__(self):
        for name in ("q_min", "q_max", "qdot_max"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not (len(self.q_min) == len(self.q_max) == len(self.qdot_max)):
            raise ConfigurationError("workspace box vectors must have equal length")
        if any(lo > hi for lo, hi in zip(self.q_min, self.q_max)):
            raise ConfigurationError("workspace box needs q_min <= q_max")
        if any(v < 0 for v in self.qdot_max):
            raise ConfigurationError("qdot_max must be non-negative")
        if self.grid_points_per_dim < 1:
            raise ConfigurationError("workspace grid is empty")

    @classmethod
    def full(cls, n: int, qdot_max: float | Sequence[float] = 5.0, points: int = 25):
        qd = np.broadcast_to(np.asarray(qdot_max, dtype=float), (n,))
        return cls((-np.pi,) * n, (np.pi,) * n, tuple(qd), points)

    @property
    def n(self) -> int:
        return len(self.q_min)

    def refined(self, factor: int) -> WorkspaceBox:
        pts = (self.grid_points_per_dim - 1) * factor + 1
        return WorkspaceBox(self.q_min, self.q_max, self.qdot_max, pts)

    def axis(self, i: int) -> np.ndarray:
        if self.q_min[i] == self.q_max[i]:
            return np.array([self.q_min[i]])
        return np.linspace(self.q_min[i], self.q_max[i], self.grid_points_per_dim)

    def grid(self, skip_first: bool = False) -> np.ndarray:
        axes = [self.axis(i) for i in range(self.n)]
        if skip_first:
            axes[0] = np.array([0.0])
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class BetaConstants:
    beta_M_min: float
    beta_M_max: float
    beta_C: float
    beta_g: float
    beta_dM_min: float
    beta_dM_max: float
    beta_fric_max: float
    beta_load_max: float
    beta_Mn_min: float
    beta_Mn_max: float
    # signed eigen-extremes of M(q) - M_n over the grid
    dM_eig_min: float = 0.0
    dM_eig_max: float = 0.0

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# -- batched kinematics ---------------------------------------------------

def _levers(model: ManipulatorModel) -> np.ndarray:
    n = model.n
    lever = np.zeros((n, n))
    for i, link in enumerate(model.links):
        lever[i, :i] = [lk.length for lk in model.links[:i]]
        lever[i, i] = link.com_offset
    return lever


def _revcumsum(a: np.ndarray) -> np.ndarray:
    return np.flip(np.cumsum(np.flip(a, axis=-1), axis=-1), axis=-1)


def batch_mass_and_partials(model: ManipulatorModel, Q: np.ndarray):
    """M (m, n, n) and dM (m, p, n, n) for m configurations."""
    m, n = Q.shape
    th = np.cumsum(Q, axis=1)
    s, c = np.sin(th), np.cos(th)
    lever = _levers(model)
    M = np.zeros((m, n, n)) + np.diag(model.armature)
    dM = np.zeros((m, n, n, n))
    for i, link in enumerate(model.links):
        r = lever[i]
        J = np.stack([-_revcumsum(r * s), _revcumsum(r * c)], axis=1)  # (m, 2, n)
        R = np.stack([-_revcumsum(r * c), -_revcumsum(r * s)], axis=1)  # d/dtheta of J rows
        M += link.mass * np.einsum("mxj,mxk->mjk", J, J)
        M[:, : i + 1, : i + 1] += link.inertia_com
        for p in range(i + 1):
            idx = np.maximum(np.arange(n), p)
            dJ = R[:, :, idx]
            dJ[:, :, i + 1:] = 0.0
            prod = np.einsum("mxj,mxk->mjk", dJ, J)
            dM[:, p] += link.mass * (prod + np.transpose(prod, (0, 2, 1)))
    return M, dM


def batch_gravity(model: ManipulatorModel, Q: np.ndarray) -> np.ndarray:
    m, n = Q.shape
    if model.gravity_accel == 0.0:
        return np.zeros((m, n))
    c = np.cos(np.cumsum(Q, axis=1))
    lever = _levers(model)
    g = np.zeros((m, n))
    for i, link in enumerate(model.links):
        g += link.mass * model.gravity_accel * _revcumsum(lever[i] * c)
    return g


def christoffel_slices(dM: np.ndarray) -> np.ndarray:
    """``Cp[..., p, j, k]`` with ``C(q, qd) = sum_p qd_p Cp[p]``."""
    # Cp[p, j, k] = 1/2 (dM_p[j,k] + dM_k[j,p] - dM_j[k,p])
    return 0.5 * (dM + np.einsum("...kjp->...pjk", dM) - np.einsum("...jkp->...pjk", dM))


def _chunks(Q: np.ndarray, size: int = 20000):
    for k in range(0, len(Q), size):
        yield Q[k:k + size]


def _coriolis_gain(dM: np.ndarray) -> np.ndarray:
    # ||sum_p u_p Cp|| <= ||u|| sqrt(sum_p ||Cp||^2): direction-free bound
    norms = np.linalg.norm(christoffel_slices(dM), ord=2, axis=(-2, -1))
    return np.sqrt((norms**2).sum(axis=-1))


def _polish(fun, Q: np.ndarray, values: np.ndarray, lo, hi, maximize: bool, free: slice,
            starts: int = 3) -> float:
    """Refine a grid extremum of ``fun`` by bounded local searches.

    ``fun`` maps an (m, n) batch to m values; only the coordinates in
    ``free`` are searched, the rest stay at their grid values.
    """
    # normalize so the optimizer's absolute tolerances fit tiny inertias
    scale = float(np.abs(values).max()) or 1.0
    sign = (-1.0 if maximize else 1.0) / scale
    best = float(values.max() if maximize else values.min())
    lo, hi = np.asarray(lo)[free], np.asarray(hi)[free]
    if np.all(hi > lo):
        order = np.argsort(sign * values)[:starts]
        for k in order:
            base = Q[k].copy()

            def f(x, base=base):
                base[free] = x
                return sign * float(fun(base[None, :])[0])

            res = minimize(f, Q[k][free], method="L-BFGS-B", bounds=list(zip(lo, hi)))
            found = float(res.fun) / sign
            best = max(best, found) if maximize else min(best, found)
    return float(best)


def _eig_extremes(model: ManipulatorModel, box: WorkspaceBox, offset: np.ndarray):
    """Smallest and largest eigenvalue of M(q) - offset over the box."""
    Q = box.grid(skip_first=True)
    lam = np.concatenate([np.linalg.eigvalsh(batch_mass_and_partials(model, c)[0] - offset)
                          for c in _chunks(Q)])
    free = slice(1, None)

    def lam_of(k):
        return lambda X: np.linalg.eigvalsh(batch_mass_and_partials(model, X)[0] - offset)[:, k]

    lo = _polish(lam_of(0), Q, lam[:, 0], box.q_min, box.q_max, False, free)
    hi = _polish(lam_of(-1), Q, lam[:, -1], box.q_min, box.q_max, True, free)
    return lo, hi


@lru_cache(maxsize=32)
def _model_constants(model: ManipulatorModel, box: WorkspaceBox):
    if box.n != model.n:
        raise ConfigurationError(f"workspace box has {box.n} joints, model has {model.n}")
    lam_min, lam_max = _eig_extremes(model, box, np.zeros((model.n, model.n)))
    Q = box.grid(skip_first=True)
    gains = np.concatenate([_coriolis_gain(batch_mass_and_partials(model, c)[1]) for c in _chunks(Q)])
    beta_c = _polish(lambda X: _coriolis_gain(batch_mass_and_partials(model, X)[1]), Q, gains,
                     box.q_min, box.q_max, True, slice(1, None))
    beta_g = 0.0
    if model.gravity_accel != 0.0:
        Qg = box.grid()
        gn = np.concatenate([np.linalg.norm(batch_gravity(model, c), axis=1) for c in _chunks(Qg, 200000)])
        beta_g = _polish(lambda X: np.linalg.norm(batch_gravity(model, X), axis=1), Qg, gn,
                         box.q_min, box.q_max, True, slice(None))
    return float(lam_min), float(lam_max), float(beta_c), float(beta_g), _friction_bound(model, box)


def _friction_bound(model: ManipulatorModel, box: WorkspaceBox) -> float:
    # each component is odd and increasing in its own velocity, so the norm
    # peaks at a corner of the velocity box
    qd = np.array(box.qdot_max)
    return float(np.linalg.norm(model.arm.friction_torque(qd)))


def estimate_betas(model: ManipulatorModel, cfg: ControllerConfig, box: WorkspaceBox,
                   load_bound: float = 0.0) -> BetaConstants:
    """Grid estimates of every constant in the ultimate bound."""
    lam_min, lam_max, beta_c, beta_g, beta_fric = _model_constants(model, box)
    dm_lo, dm_hi = _eig_extremes(model, box, cfg.M_n)
    mn = np.linalg.eigvalsh(cfg.M_n)
    dm_max = max(abs(dm_lo), abs(dm_hi))
    if dm_lo > 0:
        dm_min = dm_lo
    elif dm_hi < 0:
        dm_min = -dm_hi
    else:
        dm_min = 0.0
    return BetaConstants(
        beta_M_min=lam_min, beta_M_max=lam_max, beta_C=beta_c, beta_g=beta_g,
        beta_dM_min=dm_min, beta_dM_max=dm_max, beta_fric_max=beta_fric,
        beta_load_max=float(load_bound), beta_Mn_min=float(mn[0]), beta_Mn_max=float(mn[-1]),
        dM_eig_min=dm_lo, dM_eig_max=dm_hi,
    )


def nominal_dominance(model: ManipulatorModel, cfg: ControllerConfig, box: WorkspaceBox,
                      rtol: float = 1e-12) -> str:
    """Classify M(q) - M_n over the grid.

    dominant: negative semidefinite everywhere; dominated: positive definite
    at some point and never negative semidefinite; otherwise indefinite.
    """
    scale = max(1.0, float(np.abs(cfg.M_n).max())) * rtol
    nsd_all, pd_any, nsd_any = True, False, False
    for Q in _chunks(box.grid(skip_first=True)):
        M, _ = batch_mass_and_partials(model, Q)
        lam = np.linalg.eigvalsh(M - cfg.M_n)
        nsd = lam[:, -1] <= scale
        nsd_all &= bool(nsd.all())
        nsd_any |= bool(nsd.any())
        pd_any |= bool((lam[:, 0] > scale).any())
    if nsd_all:
        return DOMINANT
    if pd_any and not nsd_any:
        return DOMINATED
    return INDEFINITE


def ultimate_bound_gamma(betas: BetaConstants, g_dob: float, qddot_des_sup: float,
                         qdot_sup: float, qdot_des_sup: float) -> float:
    """Radius of the ball the dynamic error ends up in.

    (b_dM qdd_des + b_C |qd| |qd_des| + b_g + b_fric + b_load) / (g b_Mn_min)
    """
    denom = g_dob * betas.beta_Mn_min
    if not denom > 0:
        raise ConfigurationError(
            f"ultimate bound needs g_dob * beta_Mn_min > 0, got {g_dob} * {betas.beta_Mn_min}"
        )
    return disturbance_bound(betas, qddot_des_sup, qdot_sup, qdot_des_sup) / denom


def disturbance_bound(betas: BetaConstants, qddot_des_norm, qdot_norm, qdot_des_norm):
    """Upper bound on ||psi|| from the beta constants (works on arrays)."""
    return (betas.beta_dM_max * qddot_des_norm + betas.beta_C * qdot_norm * qdot_des_norm
            + betas.beta_g + betas.beta_fric_max + betas.beta_load_max)


def bandwidth_upper_bound(betas: BetaConstants, g_v: float) -> float:
    """Largest DOb bandwidth allowed by ``2 (M_n / M) g <= g_v``.

    The inertia ratio is replaced by its worst case beta_Mn_max / beta_M_min,
    a conservative reading of a scalar servo rule.
    """
    if not g_v > 0:
        raise ConfigurationError("velocity measurement bandwidth must be > 0")
    return g_v * betas.beta_M_min / (2.0 * betas.beta_Mn_max)


def check_bandwidth(betas: BetaConstants, g_dob: float, g_v: float) -> bool:
    limit = bandwidth_upper_bound(betas, g_v)
    ok = g_dob <= limit
    if not ok:
        warnings.warn(f"DOb bandwidth {g_dob:g} rad/s exceeds the velocity-bandwidth limit "
                      f"{limit:.4g} rad/s", BandwidthWarning, stacklevel=2)
    return ok
