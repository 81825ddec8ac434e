"""Reference trajectories (q_ref, qd_ref, qdd_ref) and operational-space IK."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from dobstab.dynamics import ConfigurationError, ManipulatorModel, forward_kinematics, tip_jacobian

KINDS = ("step-regulation", "smoothed-step", "joint-circle", "custom-samples")


class NearSingularWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Reference:
    """A joint-space reference.

    step-regulation / smoothed-step: ``start`` -> ``target`` at ``t_step``; the smoothed
    form is the step response of a critically damped third-order lag with
    time constant ``smoothing`` so position, velocity and acceleration are
    all continuous.
    joint-circle: ``center + amplitude * sin(2 pi t / period + phase)``.
    custom-samples: a C2 cubic spline through ``times``/``samples``.
    """

    kind: str
    start: np.ndarray | None = None
    target: np.ndarray | None = None
    t_step: float = 0.0
    smoothing: float = 0.02
    center: np.ndarray | None = None
    amplitude: np.ndarray | None = None
    phase: np.ndarray | None = None
    period: float = 1.0
    times: np.ndarray | None = None
    samples: np.ndarray | None = None
    _spline: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown reference kind {self.kind!r}; expected one of {KINDS}")
        for name in ("start", "target", "center", "amplitude", "phase", "times", "samples"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float))
        if self.kind in ("step-regulation", "smoothed-step"):
            if self.target is None:
                raise ConfigurationError("step references need a target")
            if self.start is None:
                object.__setattr__(self, "start", self.target.copy())
            if self.kind == "smoothed-step" and not self.smoothing > 0:
                raise ConfigurationError("smoothing time constant must be > 0")
        elif self.kind == "joint-circle":
            if self.center is None or self.amplitude is None:
                raise ConfigurationError("joint-circle needs center and amplitude")
            if self.phase is None:
                object.__setattr__(self, "phase", np.zeros_like(self.center))
            if not self.period > 0:
                raise ConfigurationError("period must be > 0")
        else:
            if self.times is None or self.samples is None or len(self.times) < 4:
                raise ConfigurationError("custom-samples need >= 4 time/sample pairs")
            if np.any(np.diff(self.times) <= 0):
                raise ConfigurationError("sample times must be strictly increasing")
            object.__setattr__(self, "_spline", CubicSpline(self.times, self.samples, axis=0))

    @property
    def n(self) -> int:
        for name in ("target", "center"):
            v = getattr(self, name)
            if v is not None:
                return len(v)
        return self.samples.shape[1]


def reference_sample(ref: Reference, t):
    """Return (q_ref, qd_ref, qdd_ref) at time(s) ``t``.

    Scalar ``t`` gives n-vectors; an array of m times gives (m, n) arrays.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0):
        raise ConfigurationError("reference time must be >= 0")
    q, qd, qdd = _sample(ref, t_arr)
    if np.ndim(t) == 0:
        return q[0], qd[0], qdd[0]
    return q, qd, qdd


def _sample(ref: Reference, t):
    m = len(t)
    if ref.kind == "step-regulation":
        after = (t >= ref.t_step)[:, None]
        q = np.where(after, ref.target, ref.start)
        return q, np.zeros((m, ref.n)), np.zeros((m, ref.n))
    if ref.kind == "smoothed-step":
        s = np.maximum(t - ref.t_step, 0.0)[:, None] / ref.smoothing
        tau = ref.smoothing
        decay = np.exp(-s)
        delta = ref.target - ref.start
        # step response of 1 / (tau s + 1)^3
        q = ref.start + delta * (1.0 - decay * (1.0 + s + 0.5 * s * s))
        qd = delta * (0.5 * s * s * decay) / tau
        qdd = delta * (s - 0.5 * s * s) * decay / tau**2
        return q, qd, qdd
    if ref.kind == "joint-circle":
        w = 2.0 * np.pi / ref.period
        arg = w * t[:, None] + ref.phase
        q = ref.center + ref.amplitude * np.sin(arg)
        qd = ref.amplitude * w * np.cos(arg)
        qdd = -w * w * ref.amplitude * np.sin(arg)
        return q, qd, qdd
    if t.max() > ref.times[-1] + 1e-12:
        raise ConfigurationError(
            f"custom-samples reference ends at t={ref.times[-1]}, requested t={t.max()}"
        )
    sp = ref._spline
    return sp(t), sp(t, 1), sp(t, 2)


def _ik_2r(l1, l2, x, y):
    """Elbow-down closed-form inverse kinematics."""
    r2 = x * x + y * y
    c2 = (r2 - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    if c2 > 1 + 1e-12 or c2 < -1 - 1e-12:
        return None
    c2 = min(1.0, max(-1.0, c2))
    q2 = -np.arccos(c2)
    q1 = np.arctan2(y, x) - np.arctan2(l2 * np.sin(q2), l1 + l2 * c2)
    return np.array([q1, q2])


def _ik_dls(model, target, seed, damping, tol=1e-12, max_iter=200):
    q = np.array(seed, dtype=float)
    for _ in range(max_iter):
        err = target - forward_kinematics(model, q)
        if np.linalg.norm(err) < tol:
            return q
        J = tip_jacobian(model, q)
        step = J.T @ np.linalg.solve(J @ J.T + damping**2 * np.eye(2), err)
        q = q + step
    return q if np.linalg.norm(target - forward_kinematics(model, q)) < 1e-9 else None


def operational_to_joint(model: ManipulatorModel, center, radius: float, period: float,
                         duration: float, *, samples_per_period: int = 2000, phase: float = 0.0,
                         seed=None, damping: float = 1e-3) -> Reference:
    """Convert a tip circle into a joint-space spline reference.

    Two-link arms use closed-form elbow-down IK; three-link arms use damped
    least squares iterated to convergence and seeded from the previous
    sample. ``seed`` is the initial guess for the first sample (3R only).
    """
    center = np.asarray(center, dtype=float)
    if radius < 0 or not period > 0 or not duration > 0:
        raise ConfigurationError("radius must be >= 0, period and duration > 0")
    lengths = model.lengths
    reach = lengths.sum()
    inner = max(0.0, 2 * lengths.max() - reach)
    n_samples = int(np.ceil(duration / period * samples_per_period)) + 1
    n_samples = max(n_samples, 8)
    times = np.linspace(0.0, duration, n_samples)
    w = 2 * np.pi / period
    pts = center + radius * np.stack([np.cos(w * times + phase), np.sin(w * times + phase)], axis=1)
    dist = np.linalg.norm(pts, axis=1)
    bad = np.nonzero((dist > reach + 1e-12) | (dist < inner - 1e-12))[0]
    if len(bad):
        i = bad[0]
        raise ConfigurationError(
            f"sample {i} at t={times[i]:.4g} s, point {pts[i].round(6).tolist()} is unreachable "
            f"(annulus {inner:.4g}..{reach:.4g} m)"
        )
    if np.any(dist > reach * (1 - 1e-6)) or np.any(dist < inner + 1e-6 * reach):
        warnings.warn("circle touches the workspace boundary; IK is near-singular",
                      NearSingularWarning, stacklevel=2)
    q = np.zeros((n_samples, model.n))
    if model.n == 2:
        for i, (x, y) in enumerate(pts):
            q[i] = _ik_2r(lengths[0], lengths[1], x, y)
    else:
        guess = np.array([0.3, 0.8, 0.8]) if seed is None else np.asarray(seed, dtype=float)
        for i, p in enumerate(pts):
            sol = _ik_dls(model, p, guess, damping)
            if sol is None:
                raise ConfigurationError(f"IK did not converge at sample {i}, point {p.tolist()}")
            q[i] = sol
            guess = sol
    q = np.unwrap(q, axis=0)
    if radius == 0:
        return Reference("step-regulation", start=q[0], target=q[0])
    return Reference("custom-samples", times=times, samples=q)
