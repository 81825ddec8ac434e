import numpy as np
import pytest

from dobstab.controller import (
    ControllerConfig,
    DObState,
    UnsupportedConfigurationError,
    control_torque,
    desired_acceleration,
    desired_torque,
    dob_estimate_algebraic,
    dob_update,
    initial_dob_state,
    saturate,
    velocity_filter,
)
from dobstab.dynamics import ConfigurationError, JointState

EQ26 = np.array([[0.0332, 0.00181, 0.00573], [0.00181, 0.0163, 0.00367], [0.00573, 0.00367, 0.00117]])


def cfg2(**kw):
    base = dict(M_n=np.eye(2), g_dob=1.0, K_D=25.0, K_P=250.0)
    base.update(kw)
    return ControllerConfig(**base)


def test_desired_acceleration_example():
    cfg = cfg2()
    state = JointState(np.array([0.1, 0.0]), np.zeros(2))
    np.testing.assert_allclose(desired_acceleration(cfg, state, (np.zeros(2),) * 3), [-25.0, 0.0])


def test_desired_acceleration_feedforward_and_damping():
    cfg = cfg2()
    state = JointState(np.zeros(2), np.array([1.0, -1.0]))
    ref = (np.zeros(2), np.zeros(2), np.array([2.0, 3.0]))
    np.testing.assert_allclose(desired_acceleration(cfg, state, ref), [2.0 - 25.0, 3.0 + 25.0])


def test_desired_torque_first_column():
    cfg = ControllerConfig(EQ26, 200.0, 80.0, 1600.0)
    np.testing.assert_allclose(desired_torque(cfg, [1.0, 0.0, 0.0]), EQ26[:, 0])


def test_algebraic_estimate_example():
    cfg = ControllerConfig(np.eye(3), 1.0, 1.0, 1.0)
    np.testing.assert_allclose(dob_estimate_algebraic(cfg, [2.0, 0.0, 0.0], np.zeros(3)), [2.0, 0.0, 0.0])


def test_unequal_bandwidths_have_no_algebraic_form():
    cfg = ControllerConfig(np.eye(2), [100.0, 200.0], 1.0, 1.0)
    assert cfg.uniform_bandwidth is None
    with pytest.raises(UnsupportedConfigurationError):
        dob_estimate_algebraic(cfg, np.zeros(2), np.zeros(2))


def test_dob_update_integrates_desired_torque():
    cfg = cfg2(g_dob=10.0, M_n=np.diag([2.0, 3.0]))
    dob = DObState(np.array([1.0, 2.0]), np.zeros(2), np.zeros(2))
    nxt, tau_hat = dob_update(cfg, dob, [1.0, -1.0], [0.5, 0.0], 0.01)
    np.testing.assert_allclose(tau_hat, [1.0 - 10.0, 2.0])
    np.testing.assert_allclose(nxt.w, [1.1, 1.9])
    with pytest.raises(ConfigurationError):
        dob_update(cfg, dob, [1.0, -1.0], [0.5, 0.0], 0.0)


def test_observer_matches_closed_form_over_many_steps(rng):
    cfg = ControllerConfig(EQ26, 150.0, 80.0, 1600.0)
    dt = 1e-3
    qd0 = rng.normal(size=3)
    dob = initial_dob_state(cfg, JointState(np.zeros(3), qd0), dt)
    qd_des = qd0.copy()
    for _ in range(200):
        qdd_des = rng.normal(size=3) * 10
        qd = rng.normal(size=3)
        dob, tau_hat = dob_update(cfg, dob, desired_torque(cfg, qdd_des), qd, dt)
        qd_des = qd_des + dt * qdd_des
        # tau_hat belongs to the previous step's qd_des
    tau_hat_now = dob.w - cfg.g_dob * (cfg.M_n @ qd)
    np.testing.assert_allclose(tau_hat_now, dob_estimate_algebraic(cfg, qd_des, qd), atol=1e-10)


def test_velocity_filter_examples():
    cfg = cfg2(g_v=1000.0)
    # exact on a ramp once settled
    v, mem = velocity_filter(cfg, np.array([1.0, 2.0]), np.zeros(2), np.array([0.01, 0.02]), 0.01)
    np.testing.assert_allclose(v, [1.0, 2.0])
    np.testing.assert_allclose(mem, [0.01, 0.02])
    # decays on a constant
    v, _ = velocity_filter(cfg, np.array([1.0, 0.0]), np.ones(2), np.ones(2), 1e-3)
    np.testing.assert_allclose(v, [np.exp(-1.0), 0.0])
    # no filter: plain difference quotient
    v, _ = velocity_filter(cfg2(), np.zeros(2), np.zeros(2), np.array([0.1, -0.1]), 0.1)
    np.testing.assert_allclose(v, [1.0, -1.0])


def test_saturation():
    cfg = cfg2(tau_max=[1.0, 2.0])
    np.testing.assert_allclose(saturate(cfg, np.array([5.0, -5.0])), [1.0, -2.0])
    np.testing.assert_allclose(saturate(cfg2(), np.array([5.0, -5.0])), [5.0, -5.0])


def test_control_torque_combines_loops():
    cfg = cfg2(g_dob=100.0)
    state = JointState(np.array([0.1, 0.0]), np.zeros(2))
    dob = initial_dob_state(cfg, state, 1e-3)
    out, nxt = control_torque(cfg, dob, state, (np.zeros(2),) * 3, 1e-3)
    np.testing.assert_allclose(out.qddot_des, [-25.0, 0.0])
    np.testing.assert_allclose(out.tau_dis_hat, 0.0, atol=1e-14)
    np.testing.assert_allclose(out.tau, out.tau_des + out.tau_dis_hat)
    np.testing.assert_allclose(nxt.w, dob.w + 1e-3 * 100.0 * out.tau_des)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ControllerConfig(np.array([[1.0, 0.5], [0.0, 1.0]]), 1.0, 1.0, 1.0)
    with pytest.raises(ConfigurationError):
        ControllerConfig(np.eye(2), -1.0, 1.0, 1.0)
    with pytest.raises(ConfigurationError):
        ControllerConfig(np.eye(2), 1.0, np.array([[1.0, 0.1], [0.1, 1.0]]), 1.0)
    with pytest.raises(ConfigurationError):
        ControllerConfig(np.eye(2), 1.0, 1.0, 1.0, g_v=-1.0)
    indefinite = ControllerConfig(EQ26 + (EQ26 - np.diag(np.diag(EQ26))) * 0.0 + np.diag([0, 0, -0.01]), 1, 1, 1)
    with pytest.raises(ConfigurationError):
        indefinite.validate()


def test_tabulated_nominal_inertia_definiteness():
    D = np.diag(np.diag(EQ26))
    ND = EQ26 - D
    assert np.linalg.eigvalsh(EQ26)[0] < 0
    for k in (0.0, 0.25, 0.5, 0.75):
        ControllerConfig(D + k * ND, 1, 1, 1).validate()
