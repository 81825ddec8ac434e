"""Euler-Lagrange dynamics of planar serial manipulators.

    M(q) qdd + C(q, qd) qd + g(q) = tau - tau_fric - tau_load

``C`` is built from Christoffel symbols of the first kind so that
``dM/dt - 2C`` is skew-symmetric for every (q, qd).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from dobstab._backend import kernels


class ConfigurationError(ValueError):
    """Invalid model, controller or scenario parameters."""


class DegenerateConfigurationError(RuntimeError):
    """The inertia matrix is too ill-conditioned to invert."""


@dataclass(frozen=True)
class LinkParams:
    length: float
    mass: float
    com_offset: float
    inertia_com: float

    def __post_init__(self):
        if not self.length > 0:
            raise ConfigurationError(f"link length must be > 0, got {self.length}")
        if not self.mass > 0:
            raise ConfigurationError(f"link mass must be > 0, got {self.mass}")
        if not self.inertia_com >= 0:
            raise ConfigurationError(f"link inertia must be >= 0, got {self.inertia_com}")
        if not 0 <= self.com_offset <= self.length:
            raise ConfigurationError(
                f"com_offset must lie in [0, length={self.length}], got {self.com_offset}"
            )


@dataclass(frozen=True)
class ManipulatorModel:
    """Planar n-link revolute arm (n = 2 or 3) with friction.

    ``gravity_accel`` acts along -y of the plane; 0 models a horizontal arm.
    Coulomb friction is smoothed as ``coulomb * tanh(qd / coulomb_eps)``.
    ``armature`` is a constant joint-side inertia (e.g. a gear-reflected
    rotor) added to the diagonal of M(q); it does not enter C or g.
    """

    links: tuple[LinkParams, ...]
    gravity_accel: float = 0.0
    viscous_friction: tuple[float, ...] = ()
    coulomb_friction: tuple[float, ...] = ()
    coulomb_eps: float = 1e-3
    armature: tuple[float, ...] = ()
    cond_limit: float = 1e12

    def __post_init__(self):
        links = tuple(self.links)
        object.__setattr__(self, "links", links)
        n = len(links)
        if n not in (2, 3):
            raise ConfigurationError(f"only 2- or 3-link arms are supported, got n={n}")
        visc = tuple(float(v) for v in self.viscous_friction) or (0.0,) * n
        coul = tuple(float(c) for c in self.coulomb_friction) or (0.0,) * n
        if len(visc) != n or len(coul) != n:
            raise ConfigurationError("friction vectors must have one entry per joint")
        if min(visc) < 0 or min(coul) < 0:
            raise ConfigurationError("friction coefficients must be non-negative")
        if self.coulomb_eps < 0:
            raise ConfigurationError("coulomb_eps must be >= 0")
        arm = tuple(float(a) for a in self.armature) or (0.0,) * n
        if len(arm) != n or min(arm) < 0:
            raise ConfigurationError("armature must be n non-negative inertias")
        object.__setattr__(self, "viscous_friction", visc)
        object.__setattr__(self, "coulomb_friction", coul)
        object.__setattr__(self, "armature", arm)

    @property
    def n(self) -> int:
        return len(self.links)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([link.length for link in self.links])

    @cached_property
    def arm(self):
        """Backend kernel object (compiled or numpy)."""
        return kernels.PlanarArm(
            self.lengths,
            np.array([link.mass for link in self.links]),
            np.array([link.com_offset for link in self.links]),
            np.array([link.inertia_com for link in self.links]),
            self.gravity_accel,
            np.array(self.viscous_friction),
            np.array(self.coulomb_friction),
            self.coulomb_eps,
            np.array(self.armature),
        )

    def replace(self, **changes) -> ManipulatorModel:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class JointState:
    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        qd = np.asarray(self.qdot, dtype=float)
        if q.shape != qd.shape:
            raise ConfigurationError("q and qdot must have the same shape")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qdot", qd)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qdot)))


GCM2_TO_KGM2 = 1e-7


# rotor inertia of the joint motors (assumed) and the gear reductions 26, 26, 3
ROTOR_INERTIA = 1.4e-5
GEAR_RATIOS = (26.0, 26.0, 3.0)


def table_i_model(gravity_accel: float = 0.0, viscous: Sequence[float] = (0.0, 0.0, 0.0),
                  coulomb: Sequence[float] = (0.0, 0.0, 0.0), coulomb_eps: float = 1e-3,
                  geared: bool = False) -> ManipulatorModel:
    """Redundant 3R planar arm of the experimental setup.

    Link inertias are given in g*cm^2 (624, 624, 622) and converted here.
    The COM is assumed at mid-link; only masses and inertias are known.
    ``geared=True`` adds the reflected rotor inertia ``J_r * N**2`` per joint.
    """
    lengths = (0.06, 0.06, 0.06)
    masses = (0.67, 0.67, 0.62)
    inertias = (624.0, 624.0, 622.0)
    links = tuple(
        LinkParams(l, m, l / 2, i * GCM2_TO_KGM2) for l, m, i in zip(lengths, masses, inertias)
    )
    armature = tuple(ROTOR_INERTIA * n**2 for n in GEAR_RATIOS) if geared else ()
    return ManipulatorModel(links, gravity_accel, tuple(viscous), tuple(coulomb), coulomb_eps,
                            armature)


def point_mass_2r(m1=1.0, m2=1.0, l1=1.0, l2=1.0, gravity_accel=0.0) -> ManipulatorModel:
    """Two-link arm with masses lumped at the distal joints."""
    return ManipulatorModel((LinkParams(l1, m1, l1, 0.0), LinkParams(l2, m2, l2, 0.0)),
                            gravity_accel)


def mass_matrix(model: ManipulatorModel, q) -> np.ndarray:
    M = model.arm.mass_matrix(np.asarray(q, dtype=float))
    return 0.5 * (M + M.T)


def mass_matrix_partials(model: ManipulatorModel, q) -> np.ndarray:
    """``dM[p] = dM/dq_p``, shape (n, n, n)."""
    return model.arm.mass_matrix_partials(np.asarray(q, dtype=float))


def coriolis_matrix(model: ManipulatorModel, q, qdot) -> np.ndarray:
    return model.arm.coriolis_matrix(np.asarray(q, dtype=float), np.asarray(qdot, dtype=float))


def gravity_vector(model: ManipulatorModel, q) -> np.ndarray:
    return model.arm.gravity_vector(np.asarray(q, dtype=float))


def friction_torque(model: ManipulatorModel, qdot) -> np.ndarray:
    return model.arm.friction_torque(np.asarray(qdot, dtype=float))


def potential_energy(model: ManipulatorModel, q) -> float:
    return float(model.arm.potential_energy(np.asarray(q, dtype=float)))


def kinetic_energy(model: ManipulatorModel, q, qdot) -> float:
    qd = np.asarray(qdot, dtype=float)
    return 0.5 * float(qd @ mass_matrix(model, q) @ qd)


def forward_dynamics(model: ManipulatorModel, state: JointState, tau, tau_load=None) -> np.ndarray:
    """Joint accelerations from Eq. of motion via a Cholesky solve.

    Raises DegenerateConfigurationError if cond(M) exceeds ``model.cond_limit``.
    """
    n = model.n
    tau = np.asarray(tau, dtype=float)
    tau_load = np.zeros(n) if tau_load is None else np.asarray(tau_load, dtype=float)
    M = mass_matrix(model, state.q)
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > model.cond_limit:
        raise DegenerateConfigurationError(f"cond(M) = {cond:.3g} at q = {state.q}")
    return model.arm.forward_dynamics(state.q, state.qdot, tau, tau_load)


def forward_kinematics(model: ManipulatorModel, q) -> np.ndarray:
    """Tip position (x, y) in meters."""
    th = np.cumsum(np.asarray(q, dtype=float), axis=-1)
    lengths = model.lengths
    return np.stack([np.sum(lengths * np.cos(th), axis=-1),
                     np.sum(lengths * np.sin(th), axis=-1)], axis=-1)


def tip_jacobian(model: ManipulatorModel, q) -> np.ndarray:
    th = np.cumsum(np.asarray(q, dtype=float))
    lengths = model.lengths
    n = model.n
    J = np.zeros((2, n))
    for j in range(n):
        J[0, j] = -np.sum(lengths[j:] * np.sin(th[j:]))
        J[1, j] = np.sum(lengths[j:] * np.cos(th[j:]))
    return J

