"""Property-based tests of the invariants of each module."""

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dobstab.bounds import BetaConstants, WorkspaceBox, estimate_betas, ultimate_bound_gamma
from dobstab.controller import (
    ControllerConfig,
    DObState,
    control_torque,
    desired_torque,
    dob_estimate_algebraic,
    dob_update,
    initial_dob_state,
    saturate,
    velocity_filter,
)
from dobstab.dynamics import (
    ConfigurationError,
    JointState,
    LinkParams,
    coriolis_matrix,
    mass_matrix,
    table_i_model,
)
from dobstab.reference import Reference, reference_sample
from dobstab.simulation import DisturbanceSchedule

TABLE_I = table_i_model(gravity_accel=9.81, geared=True)
TABLE_I_BETAS = estimate_betas(TABLE_I, ControllerConfig(np.eye(3) * 0.01, 1, 1, 1), WorkspaceBox.full(3))

angles = arrays(np.float64, 3, elements=st.floats(-np.pi, np.pi))
speeds = arrays(np.float64, 3, elements=st.floats(-5, 5))
vectors = arrays(np.float64, 3, elements=st.floats(-10, 10))
fast = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@fast
@given(angles)
def test_mass_matrix_spd_and_within_betas(q):
    M = mass_matrix(TABLE_I, q)
    assert np.array_equal(M, M.T)
    lam = np.linalg.eigvalsh(M)
    assert lam[0] > 0
    assert TABLE_I_BETAS.beta_M_min * (1 - 1e-9) <= lam[0]
    assert lam[-1] <= TABLE_I_BETAS.beta_M_max * (1 + 1e-9)


@fast
@given(angles, speeds, vectors)
def test_skew_symmetry_property(q, qd, x):
    assume(np.linalg.norm(x) > 1e-3)
    h = 1e-6
    Mdot = (mass_matrix(TABLE_I, q + h * qd) - mass_matrix(TABLE_I, q - h * qd)) / (2 * h)
    val = x @ (Mdot - 2 * coriolis_matrix(TABLE_I, q, qd)) @ x
    assert abs(val) < 1e-7 * (x @ x)


@fast
@given(angles, speeds, vectors)
def test_coriolis_bound_property(q, qd, v):
    lhs = np.linalg.norm(coriolis_matrix(TABLE_I, q, qd) @ v)
    assert lhs <= TABLE_I_BETAS.beta_C * np.linalg.norm(qd) * np.linalg.norm(v) * (1 + 1e-9) + 1e-15


@fast
@given(st.floats(0.01, 2), st.floats(0.01, 5), st.floats(0, 1), st.floats(0, 1))
def test_link_invariants(length, mass, frac, inertia):
    link = LinkParams(length, mass, frac * length, inertia)
    assert 0 <= link.com_offset <= link.length
    with pytest.raises(ConfigurationError):
        LinkParams(length, mass, length * (1 + frac) + 1e-3, inertia)


@fast
@given(st.integers(1, 60), st.floats(1.0, 500.0), st.floats(1e-4, 2e-3))
def test_observer_realizations_agree(steps, g, dt):
    rng = np.random.default_rng(steps)
    cfg = ControllerConfig(np.array([[2.0, 0.3], [0.3, 1.0]]), g, 10.0, 100.0)
    qd = rng.normal(size=2)
    dob = initial_dob_state(cfg, JointState(np.zeros(2), qd), dt)
    qd_des = qd.copy()
    for _ in range(steps):
        qdd_des = rng.normal(size=2) * 5
        qd = rng.normal(size=2)
        _, tau_hat = dob_update(cfg, dob, desired_torque(cfg, qdd_des), qd, dt)
        np.testing.assert_allclose(tau_hat, dob_estimate_algebraic(cfg, qd_des, qd), atol=1e-9 * g)
        dob, _ = dob_update(cfg, dob, desired_torque(cfg, qdd_des), qd, dt)
        qd_des = qd_des + dt * qdd_des


@fast
@given(arrays(np.float64, 2, elements=st.floats(-3, 3)), arrays(np.float64, 2, elements=st.floats(-3, 3)),
       st.floats(0, 50), st.floats(1e-3, 100))
def test_torque_is_sum_of_loops(q, qd, g, tmax):
    cfg = ControllerConfig(np.eye(2) * 1.5, g, 20.0, 100.0, tau_max=tmax)
    state = JointState(q, qd)
    dob = DObState(np.ones(2), qd, q)
    out, _ = control_torque(cfg, dob, state, (np.zeros(2),) * 3, 1e-3)
    np.testing.assert_allclose(out.tau, saturate(cfg, out.tau_des + out.tau_dis_hat))
    assert np.all(np.abs(out.tau) <= tmax)


@fast
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(1.0, 5000.0), st.floats(1e-5, 1e-2))
def test_velocity_filter_exact_on_ramps(v, q0, g_v, dt):
    cfg = ControllerConfig(np.eye(2), 1.0, 1.0, 1.0, g_v=g_v)
    q_prev = np.array([q0, -q0])
    vel = np.array([v, -v])
    est, mem = velocity_filter(cfg, vel, q_prev, q_prev + dt * vel, dt)
    np.testing.assert_allclose(est, vel, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(mem, q_prev + dt * vel)


@fast
@given(st.floats(1e-3, 1.0), st.floats(-2, 2), st.floats(0, 3))
def test_smoothed_step_is_continuous(smoothing, delta, t_step):
    ref = Reference("smoothed-step", start=[0.0, 0.0], target=[delta, -delta], t_step=t_step, smoothing=smoothing)
    eps = 1e-9
    a = reference_sample(ref, t_step)
    b = reference_sample(ref, t_step + eps)
    for x, y in zip(a, b):
        assert np.abs(x - y).max() < 1e-6 * max(1.0, abs(delta)) / smoothing**2
    q, _, _ = reference_sample(ref, np.array([0.0, t_step + 60 * smoothing]))
    np.testing.assert_allclose(q[-1], [delta, -delta], atol=1e-12 * max(1, abs(delta)) + 1e-15)


@fast
@given(st.lists(st.tuples(st.floats(0, 10), st.floats(-5, 5), st.floats(-5, 5)), max_size=5))
def test_load_schedule_within_bound(steps):
    sched = DisturbanceSchedule(tuple((t, (a, b)) for t, a, b in steps))
    t = np.linspace(0, 11, 200)
    loads = sched.load_at(t, 2)
    assert np.all(np.linalg.norm(loads, axis=1) <= sched.declared_load_bound * (1 + 1e-12))


def beta_strategy():
    pos = st.floats(0.01, 10)
    return st.builds(lambda a, b, c, g, dm, f, l, mn: BetaConstants(a, a + b, c, g, 0.0, dm, f, l, mn, mn),
                     pos, pos, pos, pos, pos, pos, pos, pos)


@fast
@given(beta_strategy(), st.floats(1, 1000), st.floats(1.01, 10), st.floats(0, 100), st.floats(0, 10),
       st.floats(0, 10))
def test_gamma_decreases_in_gain_and_nominal_inertia(b, g, factor, a, v, vd):
    gamma = ultimate_bound_gamma(b, g, a, v, vd)
    assert ultimate_bound_gamma(b, g * factor, a, v, vd) < gamma
    bigger = BetaConstants(**{**b.as_dict(), "beta_Mn_min": b.beta_Mn_min * factor})
    assert ultimate_bound_gamma(bigger, g, a, v, vd) < gamma
    assert gamma * g == pytest.approx(ultimate_bound_gamma(b, 2 * g, a, v, vd) * 2 * g, rel=1e-12)


@settings(max_examples=8, deadline=None)
@given(st.sampled_from([3, 5, 9]), st.floats(0.2, 3.0))
def test_refinement_is_monotone(points, mn):
    model = table_i_model(gravity_accel=9.81, geared=True)
    cfg = ControllerConfig(np.eye(3) * mn * 0.01, 1, 1, 1)
    box = WorkspaceBox.full(3, points=points)
    coarse = estimate_betas(model, cfg, box)
    fine = estimate_betas(model, cfg, box.refined(3))
    tol = 1e-9
    assert fine.beta_M_min <= coarse.beta_M_min * (1 + tol)
    assert fine.beta_M_max >= coarse.beta_M_max * (1 - tol)
    assert fine.beta_C >= coarse.beta_C * (1 - tol)
    assert fine.beta_g >= coarse.beta_g * (1 - tol)
    assert fine.dM_eig_min <= coarse.dM_eig_min + tol * abs(coarse.dM_eig_min)
    assert fine.dM_eig_max >= coarse.dM_eig_max - tol * abs(coarse.dM_eig_max)
    assert 0 < fine.beta_M_min <= fine.beta_M_max
    assert fine.beta_Mn_min <= fine.beta_Mn_max
