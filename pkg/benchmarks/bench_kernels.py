"""Compare the compiled and numpy kernels on the closed-loop integration.

    python3 benchmarks/bench_kernels.py [--steps N] [--repeat R]

Both backends integrate the same 3R closed loop (observer, pseudo-derivative
filter, RK4) and the final states are compared.
"""

import argparse
import time

import numpy as np

from dobstab import _pykernels
from dobstab.controller import ControllerConfig
from dobstab.dynamics import table_i_model

try:
    from dobstab import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def setup(module, steps):
    model = table_i_model(viscous=(0.02, 0.02, 0.005), geared=True)
    arm = module.PlanarArm(
        model.lengths, np.array([lk.mass for lk in model.links]),
        np.array([lk.com_offset for lk in model.links]), np.array([lk.inertia_com for lk in model.links]),
        model.gravity_accel, np.array(model.viscous_friction), np.array(model.coulomb_friction),
        model.coulomb_eps, np.array(model.armature))
    cfg = ControllerConfig(np.diag([0.0332, 0.0163, 0.00117]), 200.0, 80.0, 1600.0, g_v=1000.0)
    loop = module.ClosedLoop(arm, cfg.M_n, cfg.g_dob, cfg.K_D, cfg.K_P, cfg.g_v, np.full(3, np.inf))
    refs = np.zeros((2 * steps + 1, 3, 3))
    refs[:, 0] = [0.5, 1.0, 1.2]
    loads = np.zeros((2 * steps + 1, 3))
    noise = np.random.default_rng(7).uniform(-5e-5, 5e-5, (steps, 3))
    x0 = np.zeros(18)
    x0[:3] = x0[9:12] = [0.3, 1.2, 1.0]
    return loop, x0, refs, loads, noise


def run(module, steps, repeat):
    loop, x0, refs, loads, noise = setup(module, steps)
    best = np.inf
    for _ in range(repeat):
        out = np.zeros((steps + 1, 18))
        start = time.perf_counter()
        module.integrate(loop, x0, 1e-4, steps, refs, loads, noise, 10.0, out, 0)
        best = min(best, time.perf_counter() - start)
    return best, out[-1]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()
    t_py, x_py = run(_pykernels, args.steps, args.repeat)
    print(f"python : {t_py:8.4f} s  ({args.steps / t_py:10.0f} steps/s)")
    if _ckernels is None:
        print("cython : not built")
        return
    t_cy, x_cy = run(_ckernels, args.steps, args.repeat)
    print(f"cython : {t_cy:8.4f} s  ({args.steps / t_cy:10.0f} steps/s)")
    print(f"speedup: {t_py / t_cy:8.1f}x   max final-state difference {np.abs(x_py - x_cy).max():.2e}")


if __name__ == "__main__":
    main()
