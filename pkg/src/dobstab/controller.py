"""Acceleration-based robust position controller with a disturbance observer.

Outer loop (PD on the tracking error plus feedforward)::

    qdd_des = qdd_ref - K_D (qd - qd_ref) - K_P (q - q_ref)
    tau_des = M_n qdd_des

Inner loop: the observer ``tau_hat = G/(s+G) (tau_hat + tau_des - M_n qdd)``
is realized without the (unmeasured) acceleration as

    w' = G tau_des,        tau_hat = w - G M_n qd

which, for a scalar bandwidth g and ``w(0) = g M_n qd(0)``, reduces to
``tau_hat = g M_n (qd_des - qd)`` with ``qd_des`` the running integral of
``qdd_des`` started at ``qd(0)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dobstab.dynamics import ConfigurationError, JointState


class UnsupportedConfigurationError(ConfigurationError):
    """The requested form is only derived for a narrower configuration."""


def _diag_vector(value, n, name):
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return np.full(n, float(a))
    if a.ndim == 2:
        if a.shape != (n, n) or np.any(a - np.diag(np.diag(a))):
            raise ConfigurationError(f"{name} must be a diagonal {n}x{n} matrix")
        return np.diag(a).copy()
    if a.shape != (n,):
        raise ConfigurationError(f"{name} must have {n} entries, got shape {a.shape}")
    return a.copy()


@dataclass(frozen=True)
class ControllerConfig:
    """Gains and observer design.

    ``K_D``/``K_P`` may be given as scalars, vectors or diagonal matrices and
    are stored as their diagonals. ``g_v = 0`` feeds the exact joint velocity
    to the controller; ``g_v > 0`` uses the pseudo-derivative of position.
    ``tau_max`` (None = unlimited) saturates the applied torque.
    """

    M_n: np.ndarray
    g_dob: np.ndarray
    K_D: np.ndarray
    K_P: np.ndarray
    g_v: float = 0.0
    tau_max: np.ndarray | None = None

    def __post_init__(self):
        Mn = np.array(self.M_n, dtype=float)
        if Mn.ndim != 2 or Mn.shape[0] != Mn.shape[1]:
            raise ConfigurationError("M_n must be a square matrix")
        n = Mn.shape[0]
        if not np.allclose(Mn, Mn.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Mn).max())):
            raise ConfigurationError("M_n must be symmetric")
        object.__setattr__(self, "M_n", 0.5 * (Mn + Mn.T))
        for name in ("g_dob", "K_D", "K_P"):
            vec = _diag_vector(getattr(self, name), n, name)
            if np.any(vec < 0) or not np.all(np.isfinite(vec)):
                raise ConfigurationError(f"{name} must be finite and non-negative")
            object.__setattr__(self, name, vec)
        if not self.g_v >= 0:
            raise ConfigurationError("g_v must be >= 0")
        if self.tau_max is not None:
            tmax = _diag_vector(self.tau_max, n, "tau_max")
            if np.any(tmax <= 0):
                raise ConfigurationError("tau_max must be positive")
            object.__setattr__(self, "tau_max", tmax)

    @property
    def n(self) -> int:
        return self.M_n.shape[0]

    @property
    def uniform_bandwidth(self) -> float | None:
        """The common DOb bandwidth, or None when joints differ."""
        g = self.g_dob
        return float(g[0]) if np.all(g == g[0]) else None

    def validate(self) -> None:
        """Check the nominal inertia is positive definite.

        Kept out of construction so indefinite matrices (e.g. as printed
        design data) can still be used in pure arithmetic.
        """
        lam = np.linalg.eigvalsh(self.M_n)
        if lam[0] <= 0:
            raise ConfigurationError(
                f"M_n must be positive definite; smallest eigenvalue is {lam[0]:.4g}"
            )

    def replace(self, **changes) -> ControllerConfig:
        fields = dict(M_n=self.M_n, g_dob=self.g_dob, K_D=self.K_D, K_P=self.K_P,
                      g_v=self.g_v, tau_max=self.tau_max)
        fields.update(changes)
        return ControllerConfig(**fields)


@dataclass(frozen=True)
class DObState:
    """Observer integrator ``w`` plus the pseudo-derivative filter memory."""

    w: np.ndarray
    v_hat: np.ndarray
    q_prev: np.ndarray


@dataclass(frozen=True)
class ControllerOutput:
    tau: np.ndarray
    tau_des: np.ndarray
    tau_dis_hat: np.ndarray
    qddot_des: np.ndarray
    qdot_est: np.ndarray = field(default=None)


def initial_dob_state(cfg: ControllerConfig, state: JointState, dt: float,
                      tau_dis_hat0=None) -> DObState:
    """Consistent start: ``w(0) = tau_hat(0) + G M_n qd(0)``."""
    n = cfg.n
    tau0 = np.zeros(n) if tau_dis_hat0 is None else np.asarray(tau_dis_hat0, dtype=float)
    w = tau0 + cfg.g_dob * (cfg.M_n @ state.qdot)
    return DObState(w=w, v_hat=state.qdot.copy(), q_prev=state.q - dt * state.qdot)


def desired_acceleration(cfg: ControllerConfig, state: JointState, ref) -> np.ndarray:
    q_ref, qd_ref, qdd_ref = (np.asarray(r, dtype=float) for r in ref)
    e = state.q - q_ref
    e_dot = state.qdot - qd_ref
    return qdd_ref - cfg.K_D * e_dot - cfg.K_P * e


def desired_torque(cfg: ControllerConfig, qddot_des) -> np.ndarray:
    return cfg.M_n @ np.asarray(qddot_des, dtype=float)


def dob_update(cfg: ControllerConfig, dob: DObState, tau_des, qdot_meas, dt: float):
    """Advance the observer one held-input step.

    Returns ``(new_state, tau_hat)`` where ``tau_hat`` is the estimate at the
    start of the step. With ``tau_des`` held, ``w += dt * G tau_des`` is the
    exact solution of the integrator, so RK4 and Euler coincide here.
    """
    if not dt > 0:
        raise ConfigurationError("dt must be > 0")
    qdot_meas = np.asarray(qdot_meas, dtype=float)
    tau_hat = dob.w - cfg.g_dob * (cfg.M_n @ qdot_meas)
    w_next = dob.w + dt * cfg.g_dob * np.asarray(tau_des, dtype=float)
    return DObState(w=w_next, v_hat=dob.v_hat, q_prev=dob.q_prev), tau_hat


def dob_estimate_algebraic(cfg: ControllerConfig, qdot_des, qdot) -> np.ndarray:
    """Closed form ``g M_n (qd_des - qd)``; needs one bandwidth for all joints."""
    g = cfg.uniform_bandwidth
    if g is None:
        raise UnsupportedConfigurationError(
            "algebraic disturbance estimate requires equal DOb bandwidths, got "
            f"{cfg.g_dob.tolist()}"
        )
    return g * (cfg.M_n @ (np.asarray(qdot_des, dtype=float) - np.asarray(qdot, dtype=float)))


def velocity_filter(cfg: ControllerConfig, v_hat, q_prev, q_meas, dt: float):
    """Pseudo-derivative ``g_v s / (s + g_v)`` of sampled positions.

    Backward difference followed by an exactly discretized first-order lag:
    exact on ramps, zero on constants. Returns ``(v_hat, q_meas)``, i.e. the
    new estimate and the new filter memory. ``g_v = 0`` passes the plain
    difference quotient through.
    """
    q_meas = np.asarray(q_meas, dtype=float)
    diff = (q_meas - np.asarray(q_prev, dtype=float)) / dt
    if cfg.g_v <= 0:
        return diff, q_meas
    a = np.exp(-cfg.g_v * dt)
    return a * np.asarray(v_hat, dtype=float) + (1.0 - a) * diff, q_meas


def saturate(cfg: ControllerConfig, tau) -> np.ndarray:
    if cfg.tau_max is None:
        return tau
    return np.clip(tau, -cfg.tau_max, cfg.tau_max)


def control_torque(cfg: ControllerConfig, dob: DObState, state: JointState, ref, dt: float):
    """One sampled controller update.

    ``state.q`` is the measured position. When ``g_v > 0`` the velocity is
    estimated by :func:`velocity_filter` and ``state.qdot`` is ignored.
    Returns ``(ControllerOutput, DObState)``.
    """
    if cfg.g_v > 0:
        qdot_est, q_prev = velocity_filter(cfg, dob.v_hat, dob.q_prev, state.q, dt)
    else:
        qdot_est, q_prev = state.qdot, state.q
    meas = JointState(state.q, qdot_est)
    qdd_des = desired_acceleration(cfg, meas, ref)
    tau_des = desired_torque(cfg, qdd_des)
    dob_next, tau_hat = dob_update(cfg, dob, tau_des, qdot_est, dt)
    tau = saturate(cfg, tau_des + tau_hat)
    dob_next = DObState(w=dob_next.w, v_hat=qdot_est, q_prev=q_prev)
    return ControllerOutput(tau, tau_des, tau_hat, qdd_des, qdot_est), dob_next
