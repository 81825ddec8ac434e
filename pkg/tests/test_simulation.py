import dataclasses

import numpy as np
import pytest

from dobstab.controller import ControllerConfig
from dobstab.dynamics import ConfigurationError
from dobstab.reference import Reference
from dobstab.simulation import DisturbanceSchedule, SimConfig, integrator_step, run_scenario


def regulation_case(sim_arm, **sim_kw):
    cfg = ControllerConfig(np.eye(2) * 5.0, 200.0, 25.0, 250.0)
    ref = Reference("smoothed-step", start=[0.0, -1.0], target=[0.6, -1.6], t_step=0.05, smoothing=0.05)
    kw = dict(dt=1e-3, duration=0.5, initial_error=(0.05, -0.05))
    kw.update(sim_kw)
    return sim_arm.replace(gravity_accel=0.0), cfg, ref, DisturbanceSchedule(), SimConfig(**kw)


@pytest.mark.parametrize("method,order", [("euler", 1), ("rk4", 4)])
def test_integrator_order(method, order):
    def rhs(x):
        return np.array([x[1], -x[0]])

    errs = []
    for dt in (0.1, 0.05):
        x = np.array([1.0, 0.0])
        for _ in range(int(round(1.0 / dt))):
            x = integrator_step(rhs, x, dt, method)
        errs.append(np.linalg.norm(x - [np.cos(1.0), -np.sin(1.0)]))
    assert np.log2(errs[0] / errs[1]) == pytest.approx(order, abs=0.25)


def test_integrator_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        integrator_step(lambda x: x, np.ones(1), 0.0)
    with pytest.raises(ConfigurationError):
        integrator_step(lambda x: x, np.ones(1), 0.1, "midpoint")


def test_closed_loop_richardson(sim_arm):
    finals = []
    for dt in (4e-3, 2e-3, 1e-3):
        model, cfg, ref, dist, sim = regulation_case(sim_arm, dt=dt, duration=0.2, initial_error=(0.05, -0.05))
        ref = Reference("joint-circle", center=[0.2, -1.2], amplitude=[0.2, 0.1], period=1.0)
        run = run_scenario(model, cfg.replace(g_dob=20.0), ref, dist, sim)
        finals.append(run.q[-1])
    ratio = np.linalg.norm(finals[0] - finals[1]) / np.linalg.norm(finals[1] - finals[2])
    assert ratio == pytest.approx(16.0, rel=0.15)


def test_continuous_and_sampled_agree_for_small_steps(sim_arm):
    model, cfg, ref, dist, sim = regulation_case(sim_arm, dt=1e-4, duration=0.3)
    a = run_scenario(model, cfg, ref, dist, sim)
    b = run_scenario(model, cfg, ref, dist, dataclasses.replace(sim, mode="sampled"))
    assert b.mode == "sampled" and a.mode == "continuous"
    assert np.abs(a.q - b.q).max() < 1e-3
    assert b.diagnostics["settled_max_e"] < 1e-2


def test_runs_are_deterministic(sim_arm):
    model, cfg, ref, dist, sim = regulation_case(sim_arm, noise_amplitude=1e-4, seed=3)
    a = run_scenario(model, cfg.replace(g_v=2000.0), ref, dist, sim)
    b = run_scenario(model, cfg.replace(g_v=2000.0), ref, dist, sim)
    c = run_scenario(model, cfg.replace(g_v=2000.0), ref, dist, dataclasses.replace(sim, seed=4))
    assert np.array_equal(a.tau, b.tau)
    assert not np.array_equal(a.tau, c.tau)
    assert "measured velocity differs from the true velocity" in a.flags


def test_divergent_run_stops_and_reports(sim_arm):
    model, cfg, ref, dist, sim = regulation_case(sim_arm, duration=10.0, divergence_threshold=2.0)
    run = run_scenario(model, cfg.replace(M_n=np.eye(2) * 0.065, g_dob=10.0), ref, dist, sim)
    assert run.verdict == "divergent"
    assert run.diverged_at is not None and run.t[-1] <= run.diverged_at
    assert len(run.t) < sim.n_steps + 1


def test_log_decimation(sim_arm):
    model, cfg, ref, dist, sim = regulation_case(sim_arm, log_decimation=10)
    run = run_scenario(model, cfg, ref, dist, sim)
    assert len(run.t) == sim.n_steps // 10 + 1
    np.testing.assert_allclose(np.diff(run.t), 1e-2)


def test_load_step_enters_log(sim_arm):
    model, cfg, ref, _, sim = regulation_case(sim_arm)
    dist = DisturbanceSchedule(((0.25, (1.0, -2.0)),))
    run = run_scenario(model, cfg, ref, dist, sim)
    np.testing.assert_allclose(run.tau_load[run.t < 0.25], 0.0)
    np.testing.assert_allclose(run.tau_load[run.t >= 0.25], [[1.0, -2.0]] * int((run.t >= 0.25).sum()))
    assert 0.25 in run.discontinuities


def test_disturbance_schedule():
    d = DisturbanceSchedule(((1.0, (0.0, 2.0)), (0.5, (1.0, 0.0))))
    assert d.times == [0.5, 1.0]
    assert d.declared_load_bound == 2.0
    np.testing.assert_allclose(d.load_at([0.0, 0.7, 2.0], 2), [[0, 0], [1, 0], [0, 2]])
    with pytest.raises(ConfigurationError):
        DisturbanceSchedule(((0.0, (3.0, 4.0)),), declared_load_bound=4.9)
    with pytest.raises(ConfigurationError):
        d.load_at(0.0, 3)


def test_sim_config_validation():
    with pytest.raises(ConfigurationError, match="seed"):
        SimConfig(noise_amplitude=1e-4)
    for bad in (dict(dt=0.0), dict(duration=1e-4, dt=1e-3), dict(integrator="ab2"), dict(mode="async"),
                dict(log_decimation=0), dict(noise_amplitude=-1.0, seed=1)):
        with pytest.raises(ConfigurationError):
            SimConfig(**bad)
    assert SimConfig(dt=1e-3, duration=1.0).n_steps == 1000


def test_dimension_mismatch(sim_arm):
    model, cfg, ref, dist, sim = regulation_case(sim_arm)
    with pytest.raises(ConfigurationError):
        run_scenario(model, ControllerConfig(np.eye(3), 1, 1, 1), ref, dist, sim)


def test_saturation_flag(sim_arm):
    model, cfg, ref, dist, sim = regulation_case(sim_arm)
    run = run_scenario(model, cfg.replace(tau_max=50.0), ref, dist, sim)
    assert np.abs(run.tau).max() <= 50.0
    assert "torque saturation enabled" in run.flags


@pytest.mark.parametrize("name", ["theorem3_regulation", "theorem2_circle", "fig4a_unstable",
                                  "fig6_diag_mn_sweep", "fig8_offdiag_mn", "fig9_bandwidth_x_inertia"])
def test_verdict_survives_step_halving(name):
    from conftest import preset_run
    from dobstab.cli import execute
    scn, run = preset_run(name)
    half = dataclasses.replace(scn, sim=dataclasses.replace(scn.sim, dt=scn.sim.dt / 2))
    assert execute(half).verdict == run.verdict
