import os
import subprocess
import sys

import numpy as np
import pytest

from dobstab import _pykernels
from dobstab._backend import BACKEND
from dobstab.dynamics import table_i_model
from dobstab.simulation import build_loop

ckernels = pytest.importorskip("dobstab._ckernels")


def pair(model):
    args = (model.lengths, np.array([lk.mass for lk in model.links]),
            np.array([lk.com_offset for lk in model.links]), np.array([lk.inertia_com for lk in model.links]),
            model.gravity_accel, np.array(model.viscous_friction), np.array(model.coulomb_friction),
            model.coulomb_eps, np.array(model.armature))
    return _pykernels.PlanarArm(*args), ckernels.PlanarArm(*args)


def test_compiled_backend_selected():
    assert BACKEND == "cython"


def test_kernel_parity(rng):
    model = table_i_model(gravity_accel=9.81, viscous=(0.1, 0.1, 0.1), coulomb=(0.01, 0.02, 0.0), geared=True)
    py, cy = pair(model)
    for _ in range(50):
        q = rng.uniform(-np.pi, np.pi, 3)
        qd = rng.uniform(-5, 5, 3)
        tau = rng.normal(size=3)
        load = rng.normal(size=3) * 0.1
        np.testing.assert_allclose(cy.mass_matrix(q), py.mass_matrix(q), rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(cy.mass_matrix_partials(q), py.mass_matrix_partials(q), rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(cy.coriolis_matrix(q, qd), py.coriolis_matrix(q, qd), rtol=1e-13, atol=1e-17)
        np.testing.assert_allclose(cy.gravity_vector(q), py.gravity_vector(q), rtol=1e-13, atol=1e-16)
        np.testing.assert_allclose(cy.friction_torque(qd), py.friction_torque(qd), rtol=1e-14)
        np.testing.assert_allclose(cy.forward_dynamics(q, qd, tau, load), py.forward_dynamics(q, qd, tau, load),
                                   rtol=1e-11, atol=1e-10)


def test_trajectory_parity():
    model = table_i_model(geared=True)
    py, cy = pair(model)
    from dobstab.controller import ControllerConfig
    cfg = ControllerConfig(np.diag([0.0332, 0.0163, 0.00117]), 200.0, 80.0, 1600.0, g_v=1000.0)
    args = (cfg.M_n, cfg.g_dob, cfg.K_D, cfg.K_P, cfg.g_v, np.full(3, np.inf))
    loops = (_pykernels.ClosedLoop(py, *args), ckernels.ClosedLoop(cy, *args))
    N = 500
    refs = np.zeros((2 * N + 1, 3, 3))
    refs[:, 0] = [0.3, 1.2, 1.0]
    loads = np.zeros((2 * N + 1, 3))
    noise = np.random.default_rng(0).uniform(-5e-5, 5e-5, (N, 3))
    x0 = np.zeros(18)
    x0[:3] = [0.35, 1.15, 1.05]
    x0[9:12] = x0[:3] + noise[0] * 0
    outs = []
    for loop in loops:
        out = np.zeros((N + 1, 18))
        k = loop_module(loop).integrate(loop, x0, 1e-4, N, refs, loads, noise, 10.0, out, 0)
        assert k == N
        outs.append(out)
    np.testing.assert_allclose(outs[0], outs[1], rtol=1e-10, atol=1e-11)


def loop_module(loop):
    return ckernels if isinstance(loop, ckernels.ClosedLoop) else _pykernels


def test_build_loop_uses_selected_backend():
    from dobstab.controller import ControllerConfig
    loop = build_loop(table_i_model(), ControllerConfig(np.eye(3) * 0.01, 1, 1, 1))
    assert isinstance(loop, ckernels.ClosedLoop)


def test_pure_python_fallback_in_subprocess():
    code = ("from dobstab._backend import BACKEND; from dobstab.scenario import load; "
            "from dobstab.cli import execute; import dataclasses; "
            "s = load('theorem3_regulation'); "
            "s = dataclasses.replace(s, sim=dataclasses.replace(s.sim, duration=0.3)); "
            "r = execute(s); print(BACKEND, repr(float(r.q[-1, 0])))")
    env = dict(os.environ, DOBSTAB_PURE_PYTHON="1")
    py = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    env["DOBSTAB_PURE_PYTHON"] = "0"
    cy = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    name_py, q_py = py.stdout.split()
    name_cy, q_cy = cy.stdout.split()
    assert (name_py, name_cy) == ("python", "cython")
    assert float(q_py) == pytest.approx(float(q_cy), rel=1e-11)
