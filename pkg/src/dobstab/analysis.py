"""Theory quantities along a run and the run verdict.

With ``e_D = qd - qd_des`` the closed loop obeys

    M e_D' + C e_D + G M_n e_D + psi = 0,
    psi = (M - M_n) qdd_des + C qd_des + g + tau_fric + tau_load,

and ``V = 1/2 e_D' M e_D`` has ``V' = -e_D' G M_n e_D - e_D' psi``.
Everything here is vectorized over the logged rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from dobstab.bounds import (
    BetaConstants,
    WorkspaceBox,
    bandwidth_upper_bound,
    batch_gravity,
    batch_mass_and_partials,
    christoffel_slices,
    disturbance_bound,
    estimate_betas,
    nominal_dominance,
    ultimate_bound_gamma,
)
from dobstab.controller import ControllerConfig
from dobstab.dynamics import ConfigurationError, ManipulatorModel

CONVERGED = "converged"
BOUNDED = "bounded"
DIVERGENT = "divergent"
GAMMA_VIOLATED = "bounded_gamma_violated"
VERDICTS = (CONVERGED, BOUNDED, DIVERGENT, GAMMA_VIOLATED)


@dataclass(frozen=True)
class AnalysisConfig:
    """Post-processing settings.

    ``box`` defaults to all joint angles with the velocity box taken from
    the run itself. ``velocity_bandwidth`` is the measurement bandwidth used
    in the bandwidth check when the controller reads exact velocity.
    """

    settle_fraction: float = 0.2
    e_tol: float = 1e-3
    eD_tol: float = 1e-2
    box: WorkspaceBox | None = None
    grid_points: int = 25
    velocity_bandwidth: float | None = None
    discontinuity_guard: int = 2

    def __post_init__(self):
        if not 0 < self.settle_fraction <= 1:
            raise ConfigurationError("settle_fraction must lie in (0, 1]")
        if not (self.e_tol > 0 and self.eD_tol > 0):
            raise ConfigurationError("tolerances must be > 0")
        if self.velocity_bandwidth is not None and not self.velocity_bandwidth > 0:
            raise ConfigurationError("velocity_bandwidth must be > 0")


# -- batched model terms ---------------------------------------------------

def batch_terms(model: ManipulatorModel, Q, QD, chunk: int = 4096):
    """M, C(q, qd), g and friction for every row of ``Q``/``QD``."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    QD = np.atleast_2d(np.asarray(QD, dtype=float))
    m, n = Q.shape
    M = np.empty((m, n, n))
    C = np.empty((m, n, n))
    for k in range(0, m, chunk):
        sl = slice(k, k + chunk)
        Mk, dM = batch_mass_and_partials(model, Q[sl])
        M[sl] = 0.5 * (Mk + np.transpose(Mk, (0, 2, 1)))
        C[sl] = np.einsum("mp,mpjk->mjk", QD[sl], christoffel_slices(dM))
    g = batch_gravity(model, Q)
    return M, C, g, batch_friction(model, QD)


def batch_friction(model: ManipulatorModel, QD) -> np.ndarray:
    QD = np.asarray(QD, dtype=float)
    visc = np.asarray(model.viscous_friction)
    coul = np.asarray(model.coulomb_friction)
    if model.coulomb_eps > 0:
        return visc * QD + coul * np.tanh(QD / model.coulomb_eps)
    return visc * QD + coul * np.sign(QD)


def batch_forward_dynamics(model: ManipulatorModel, Q, QD, TAU, LOAD) -> np.ndarray:
    M, C, g, fric = batch_terms(model, Q, QD)
    rhs = TAU - LOAD - np.einsum("mjk,mk->mj", C, QD) - g - fric
    return np.linalg.solve(M, rhs[..., None])[..., 0]


# -- theory quantities -------------------------------------------------------

def dynamic_error(t, e, edot, K_D, K_P) -> np.ndarray:
    """``e_D = edot + K_D e + K_P int e`` with a trapezoid integral from t[0]."""
    e = np.asarray(e, dtype=float)
    int_e = cumulative_trapezoid(e, np.asarray(t, dtype=float), axis=0, initial=0.0)
    return np.asarray(edot, dtype=float) + np.asarray(K_D) * e + np.asarray(K_P) * int_e


def disturbance_psi(model: ManipulatorModel, cfg: ControllerConfig, q, qdot, qddot_des,
                    qdot_des, tau_load) -> np.ndarray:
    """``(M - M_n) qdd_des + C qd_des + g + tau_fric + tau_load`` per row."""
    single = np.ndim(q) == 1
    q, qdot, qddot_des, qdot_des, tau_load = (np.atleast_2d(np.asarray(a, dtype=float))
                                              for a in (q, qdot, qddot_des, qdot_des, tau_load))
    M, C, g, fric = batch_terms(model, q, qdot)
    psi = (np.einsum("mjk,mk->mj", M - cfg.M_n, qddot_des) + np.einsum("mjk,mk->mj", C, qdot_des)
           + g + fric + tau_load)
    return psi[0] if single else psi


def lyapunov(model: ManipulatorModel, e_D, q) -> np.ndarray:
    """``V = 1/2 e_D' M(q) e_D``; scalar for one row, array for many."""
    single = np.ndim(q) == 1
    e_D = np.atleast_2d(np.asarray(e_D, dtype=float))
    M, _ = batch_mass_and_partials(model, np.atleast_2d(np.asarray(q, dtype=float)))
    V = 0.5 * np.einsum("mj,mjk,mk->m", e_D, M, e_D)
    return float(V[0]) if single else V


def lyapunov_rate(cfg: ControllerConfig, e_D, psi) -> np.ndarray:
    """``V' = -e_D' G M_n e_D - e_D' psi`` (after the skew-symmetric cancellation)."""
    e_D = np.asarray(e_D, dtype=float)
    GMn = cfg.g_dob[:, None] * cfg.M_n
    return -np.einsum("...j,jk,...k->...", e_D, GMn, e_D) - np.einsum("...j,...j->...", e_D, psi)


def lyapunov_rate_direct(model: ManipulatorModel, q, qdot, qddot, qddot_des, e_D,
                         h: float = 1e-6) -> np.ndarray:
    """``e_D' M e_D' + 1/2 e_D' Mdot e_D`` before any cancellation.

    ``Mdot`` is a central difference of M along the velocity direction, so
    this form never uses the skew-symmetry of ``Mdot - 2C``.
    """
    q, qdot = np.asarray(q, dtype=float), np.asarray(qdot, dtype=float)
    M, _ = batch_mass_and_partials(model, q)
    Mp, _ = batch_mass_and_partials(model, q + h * qdot)
    Mm, _ = batch_mass_and_partials(model, q - h * qdot)
    Mdot = (Mp - Mm) / (2 * h)
    eD_dot = np.asarray(qddot) - np.asarray(qddot_des)
    return (np.einsum("mj,mjk,mk->m", e_D, M, eD_dot)
            + 0.5 * np.einsum("mj,mjk,mk->m", e_D, Mdot, e_D))


def numeric_rate(t, V) -> np.ndarray:
    """Second-order central differences of V (one-sided at the ends)."""
    if len(V) < 2:
        return np.zeros_like(V)
    return np.gradient(V, t, edge_order=2 if len(V) > 2 else 1)


def eq10_residual(model: ManipulatorModel, cfg: ControllerConfig, q, qdot, qddot, qddot_des,
                  e_D, psi) -> np.ndarray:
    """Norm of ``M e_D' + C e_D + G M_n e_D + psi`` per row (``e_D' = qdd - qdd_des``)."""
    M, C, _, _ = batch_terms(model, q, qdot)
    GMn = cfg.g_dob[:, None] * cfg.M_n
    r = (np.einsum("mjk,mk->mj", M, qddot - qddot_des) + np.einsum("mjk,mk->mj", C, e_D)
         + e_D @ GMn.T + psi)
    return np.linalg.norm(r, axis=1)


def effective_gain(cfg: ControllerConfig, beta_Mn_min: float) -> float:
    """Scalar ``g`` with ``e' G M_n e >= g beta_Mn_min |e|^2``.

    Equals the common bandwidth when all joints share one.
    """
    g = cfg.uniform_bandwidth
    if g is not None:
        return g
    GMn = cfg.g_dob[:, None] * cfg.M_n
    lam = np.linalg.eigvalsh(0.5 * (GMn + GMn.T))[0]
    return float(lam / beta_Mn_min)


def sufficient_condition_margin(betas: BetaConstants, g_dob: float, e_D_norm, qddot_des_norm,
                                qdot_norm, qdot_des_norm):
    """``g beta_Mn_min |e_D| - B``; positive means V' <= 0 at that point."""
    return (g_dob * betas.beta_Mn_min * np.asarray(e_D_norm)
            - disturbance_bound(betas, qddot_des_norm, qdot_norm, qdot_des_norm))


def passivity_integral(t, e_D, psi):
    """Running ``int e_D' psi dt``, its infimum and ``phi = max(0, -inf)``."""
    integrand = np.einsum("mj,mj->m", e_D, psi)
    run = cumulative_trapezoid(integrand, t, initial=0.0)
    inf = float(run.min()) if len(run) else 0.0
    return run, inf, max(0.0, -inf)


def settle_mask(t, fraction: float, t_end: float | None = None) -> np.ndarray:
    t = np.asarray(t)
    t_end = t[-1] if t_end is None else t_end
    return t >= t_end - fraction * (t_end - t[0]) - 1e-12


def classify_run(log, gamma: float, settle_fraction: float = 0.2, e_tol: float = 1e-3,
                 eD_tol: float = 1e-2) -> str:
    """converged, bounded, divergent, or bounded_gamma_violated."""
    if log.diverged or not (np.all(np.isfinite(log.q)) and np.all(np.isfinite(log.qdot))):
        return DIVERGENT
    w = settle_mask(log.t, settle_fraction)
    e_max = float(log.e_norm[w].max())
    eD_max = float(log.eD_norm[w].max())
    if e_max < e_tol and eD_max < eD_tol:
        return CONVERGED
    if eD_max <= gamma:
        return BOUNDED
    return GAMMA_VIOLATED


def lyapunov_violations(log, after_fraction: float = 0.2, rtol: float = 1e-12) -> int:
    """Number of steps after the transient window where V increases."""
    start = log.t[0] + after_fraction * (log.t[-1] - log.t[0])
    V = log.V[log.t >= start]
    slack = rtol * max(float(np.max(log.V)), np.finfo(float).tiny)
    return int(np.count_nonzero(np.diff(V) > slack))


def _guard_mask(log, guard: int) -> np.ndarray:
    """Rows usable for finite-difference checks (away from jumps and ends)."""
    ok = np.ones(len(log.t), dtype=bool)
    ok[:guard] = False
    ok[-guard:] = False
    step = log.t[1] - log.t[0] if len(log.t) > 1 else 1.0
    for tj in log.discontinuities:
        ok[np.abs(log.t - tj) <= (guard + 0.5) * step] = False
    return ok


def _default_box(log, points: int) -> WorkspaceBox:
    qd = np.abs(log.qdot).max(axis=0)
    return WorkspaceBox.full(log.n, qdot_max=tuple(float(v) for v in qd), points=points)


def analyze(model: ManipulatorModel, cfg: ControllerConfig, log, dist, acfg: AnalysisConfig | None = None,
            betas: BetaConstants | None = None):
    """Fill the theory fields and the verdict of a RunLog (in place; returned)."""
    acfg = acfg or AnalysisConfig()
    box = acfg.box or _default_box(log, acfg.grid_points)
    if betas is None:
        betas = estimate_betas(model, cfg, box, dist.declared_load_bound)
    log.betas = betas

    log.e_D = log.qdot - log.qdot_des
    log.e_D_integral_form = dynamic_error(log.t, log.e, log.edot, cfg.K_D, cfg.K_P)
    log.psi = disturbance_psi(model, cfg, log.q, log.qdot, log.qddot_des, log.qdot_des, log.tau_load)
    log.V = lyapunov(model, log.e_D, log.q)
    log.Vdot = lyapunov_rate(cfg, log.e_D, log.psi)
    log.Vdot_numeric = numeric_rate(log.t, log.V)
    log.Vdot_direct = lyapunov_rate_direct(model, log.q, log.qdot, log.qddot, log.qddot_des, log.e_D)
    log.eq10_residual = eq10_residual(model, cfg, log.q, log.qdot, log.qddot, log.qddot_des,
                                      log.e_D, log.psi)
    log.passivity, pass_inf, phi = passivity_integral(log.t, log.e_D, log.psi)
    if cfg.uniform_bandwidth is not None:
        log.tau_dis_alg = cfg.uniform_bandwidth * (-log.e_D @ cfg.M_n.T)

    norms = {
        "qddot_des": np.linalg.norm(log.qddot_des, axis=1),
        "qdot": np.linalg.norm(log.qdot, axis=1),
        "qdot_des": np.linalg.norm(log.qdot_des, axis=1),
    }
    log.suprema = {f"{k}_sup": float(v.max()) for k, v in norms.items()}
    g_eff = effective_gain(cfg, betas.beta_Mn_min)
    log.gamma_post = ultimate_bound_gamma(betas, g_eff, log.suprema["qddot_des_sup"],
                                          log.suprema["qdot_sup"], log.suprema["qdot_des_sup"])
    log.margin = sufficient_condition_margin(betas, g_eff, log.eD_norm, norms["qddot_des"],
                                             norms["qdot"], norms["qdot_des"])
    log.verdict = classify_run(log, log.gamma_post, acfg.settle_fraction, acfg.e_tol, acfg.eD_tol)

    settled = settle_mask(log.t, acfg.settle_fraction)
    guard = _guard_mask(log, acfg.discontinuity_guard)
    scale = np.maximum(1.0, np.abs(log.Vdot))
    vdot_err = np.abs(log.Vdot - log.Vdot_numeric) / scale
    implication = (log.margin > 0) & (log.Vdot > 0)
    s = np.einsum("mj,mj->m", log.e_D, log.qddot_des)
    GMn = cfg.g_dob[:, None] * cfg.M_n
    eq25 = np.einsum("mj,mj->m", log.e_D, log.psi) >= np.einsum("mj,jk,mk->m", log.e_D, GMn, log.e_D)

    g_v = cfg.g_v if cfg.g_v > 0 else acfg.velocity_bandwidth
    bw_limit = bandwidth_upper_bound(betas, g_v) if g_v else None
    log.diagnostics = {
        "settled_max_e": float(log.e_norm[settled].max()),
        "settled_max_eD": float(log.eD_norm[settled].max()),
        "eq10_residual_max": float(log.eq10_residual.max()),
        "psi_norm_max": float(np.linalg.norm(log.psi, axis=1).max()),
        "vdot_crosscheck_max": float(vdot_err[guard].max()) if guard.any() else 0.0,
        "vdot_direct_max": float((np.abs(log.Vdot - log.Vdot_direct) / scale).max()),
        "margin_implication_violations": int(np.count_nonzero(implication)),
        "lyapunov_increases_after_transient": lyapunov_violations(log),
        "passivity_inf": pass_inf,
        "passivity_phi": phi,
        "eq25_fraction_settled": float(eq25[settled].mean()),
        "eD_dot_qdd_des_positive_fraction": float((s > 0).mean()),
        "dominance": nominal_dominance(model, cfg, box),
        "effective_gain": g_eff,
        "bandwidth_limit": bw_limit,
        "bandwidth_ok": (bool(np.max(cfg.g_dob) <= bw_limit) if bw_limit is not None else None),
        "velocity_bandwidth_used": g_v or None,
    }
    return log
