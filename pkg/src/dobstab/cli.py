"""Command-line interface: ``run``, ``sweep`` and ``check``.

Exit codes: 0 on success (a divergent run is a result, not a failure),
2 on an invalid scenario or invocation.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from dobstab._backend import BACKEND
from dobstab.analysis import effective_gain
from dobstab.bounds import (
    WorkspaceBox,
    bandwidth_upper_bound,
    estimate_betas,
    nominal_dominance,
    ultimate_bound_gamma,
)
from dobstab.dynamics import ConfigurationError
from dobstab.scenario import (
    PRESETS,
    Scenario,
    ScenarioError,
    build_scenario,
    read_scenario,
    validate_summary,
    with_override,
)
from dobstab.simulation import RunLog, run_scenario
from dobstab.svgplot import line_plot

log = logging.getLogger("dobstab")

WORKERS_ENV = "DOBSTAB_WORKERS"
SWEEP_AXES = ("g_dob", "mn_scale", "mn_offdiag_scale")


# -- running -----------------------------------------------------------------

def execute(scn: Scenario) -> RunLog:
    return run_scenario(scn.model, scn.controller, scn.reference, scn.disturbances, scn.sim,
                        scn.analysis)


def gamma_prior(scn: Scenario, betas) -> float | None:
    sup = scn.a_priori_suprema
    if not sup:
        return None
    g = effective_gain(scn.controller, betas.beta_Mn_min)
    return ultimate_bound_gamma(betas, g, sup["qddot_des"], sup["qdot"], sup["qdot_des"])


def csv_header(n: int) -> list[str]:
    cols = ["t"] + [f"q{i}" for i in range(1, n + 1)] + [f"e{i}" for i in range(1, n + 1)]
    cols += ["eD_norm", "V", "Vdot"]
    cols += [f"tau{i}" for i in range(1, n + 1)] + [f"tau_dis_hat{i}" for i in range(1, n + 1)]
    return cols + ["gamma_post", "margin"]


def write_csv(run: RunLog, path: Path) -> None:
    m = len(run.t)
    table = np.column_stack([
        run.t, run.q, run.e, run.eD_norm, run.V, run.Vdot, run.tau, run.tau_dis_hat,
        np.full(m, run.gamma_post), run.margin,
    ])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(csv_header(run.n)) + "\n")
        np.savetxt(fh, table, fmt="%.17g", delimiter=",")


def _clean(value):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


def summary_dict(scn: Scenario, run: RunLog) -> dict:
    out = {
        "scenario": scn.name,
        "verdict": run.verdict,
        "diverged_at": run.diverged_at,
        "n_rows": len(run.t),
        "suprema": run.suprema,
        "gamma_post": run.gamma_post,
        "gamma_prior": gamma_prior(scn, run.betas),
        "betas": run.betas.as_dict(),
        "diagnostics": run.diagnostics,
        "flags": list(run.flags),
        "backend": BACKEND,
    }
    return _clean(out)


def write_plots(run: RunLog, out: Path, label: str = "") -> None:
    (out / "error_norm.svg").write_text(line_plot(
        [(label, run.t, run.e_norm)], "Position error norm", "t [s]", "||e|| [rad]", logy=True))
    (out / "lyapunov.svg").write_text(line_plot(
        [(label, run.t, run.V)], "Lyapunov function", "t [s]", "V", logy=True))
    (out / "lyapunov_rate.svg").write_text(line_plot(
        [(label, run.t, run.Vdot)], "Lyapunov derivative", "t [s]", "dV/dt"))


def run_command(source, out_dir) -> dict:
    data = read_scenario(source)
    scn = build_scenario(data, Path(str(source)).stem)
    run = execute(scn)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(run, out / "run.csv")
    summary = summary_dict(scn, run)
    validate_summary(summary)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if scn.plots:
        write_plots(run, out, scn.name)
    return summary


# -- sweeps ------------------------------------------------------------------

def _variant(args):
    data, axis, value, name = args
    scn = build_scenario(with_override(data, axis, value), name)
    run = execute(scn)
    d = run.diagnostics
    stride = max(1, len(run.t) // 3000)
    return {
        "row": {
            "value": value,
            "verdict": run.verdict,
            "settled_max_e": d["settled_max_e"],
            "settled_max_eD": d["settled_max_eD"],
            "gamma_post": run.gamma_post,
            "gamma_prior": gamma_prior(scn, run.betas),
            "eq24_limit": d["bandwidth_limit"],
            "eq24_ok": d["bandwidth_ok"],
        },
        "t": run.t[::stride],
        "e_norm": run.e_norm[::stride],
        "eD_norm": run.eD_norm[::stride],
    }


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            value = int(raw)
        except ValueError:
            raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
        if value < 1:
            raise ConfigurationError(f"{WORKERS_ENV} must be >= 1")
        return value
    return max(1, min(4, os.cpu_count() or 1))


def sweep_results(source, axis: str, values, workers: int | None = None) -> list[dict]:
    """Run every variant; results come back in the order of ``values``."""
    if axis not in SWEEP_AXES:
        raise ScenarioError("axis", f"must be one of {SWEEP_AXES}")
    values = [float(v) for v in values]
    if not values:
        raise ScenarioError("values", "at least one value is required")
    if any(not (v >= 0 and math.isfinite(v)) for v in values) or (
            axis != "mn_offdiag_scale" and any(v == 0 for v in values)):
        raise ScenarioError("values", "sweep values must be positive")
    data = read_scenario(source)
    name = Path(str(source)).stem
    # fail fast on the base scenario before spawning workers
    build_scenario(data, name)
    jobs = [(data, axis, v, name) for v in values]
    workers = worker_count() if workers is None else workers
    if workers == 1 or len(jobs) == 1:
        return [_variant(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_variant, jobs))


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


SWEEP_COLUMNS = ("value", "verdict", "settled_max_e", "settled_max_eD", "gamma_post", "gamma_prior",
                 "eq24_limit", "eq24_ok")


def sweep_command(source, axis: str, values, out_dir, workers: int | None = None) -> list[dict]:
    results = sweep_results(source, axis, values, workers)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        fh.write(",".join(SWEEP_COLUMNS) + "\n")
        for r in results:
            fh.write(",".join(_fmt(r["row"][c]) for c in SWEEP_COLUMNS) + "\n")
    label = {"g_dob": "g_dob", "mn_scale": "M_n x", "mn_offdiag_scale": "M_n^nd x"}[axis]
    (out / "error_norm_overlay.svg").write_text(line_plot(
        [(f"{label} {r['row']['value']:g}", r["t"], r["e_norm"]) for r in results],
        f"Position error norm, sweep over {axis}", "t [s]", "||e|| [rad]", logy=True))
    (out / "dynamic_error_overlay.svg").write_text(line_plot(
        [(f"{label} {r['row']['value']:g}", r["t"], r["eD_norm"]) for r in results],
        f"Dynamic error norm, sweep over {axis}", "t [s]", "||e_D||", logy=True))
    return [r["row"] for r in results]


# -- static check ----------------------------------------------------------------

def check_command(source) -> dict:
    data = read_scenario(source)
    scn = build_scenario(data, Path(str(source)).stem)
    box = scn.analysis.box or WorkspaceBox.full(scn.model.n)
    betas = estimate_betas(scn.model, scn.controller, box, scn.disturbances.declared_load_bound)
    g_v = scn.controller.g_v or scn.analysis.velocity_bandwidth
    report = {
        "scenario": scn.name,
        "n": scn.model.n,
        "betas": betas.as_dict(),
        "dominance": nominal_dominance(scn.model, scn.controller, box),
        "g_dob": scn.controller.g_dob.tolist(),
        "velocity_bandwidth": g_v or None,
        "eq24_limit": bandwidth_upper_bound(betas, g_v) if g_v else None,
        "gamma_prior": gamma_prior(scn, betas),
    }
    report["eq24_ok"] = (None if report["eq24_limit"] is None
                         else bool(max(report["g_dob"]) <= report["eq24_limit"]))
    return _clean(report)


# -- entry point ---------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dobstab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="simulate one scenario")
    r.add_argument("scenario", help=f"scenario file or preset name ({', '.join(PRESETS)})")
    r.add_argument("--out", required=True)
    s = sub.add_parser("sweep", help="run a scenario over values of one parameter")
    s.add_argument("scenario")
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma-separated list")
    s.add_argument("--out", required=True)
    c = sub.add_parser("check", help="static pre-flight report, no simulation")
    c.add_argument("scenario")
    sub.add_parser("presets", help="list the bundled presets")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            summary = run_command(args.scenario, args.out)
            print(f"verdict: {summary['verdict']}")
        elif args.command == "sweep":
            try:
                values = [float(v) for v in args.values.split(",") if v.strip()]
            except ValueError:
                raise ScenarioError("values", f"not a number list: {args.values!r}") from None
            rows = sweep_command(args.scenario, args.axis, values, args.out)
            for row in rows:
                print(f"{row['value']:g}: {row['verdict']} settled max |e_D| = {row['settled_max_eD']:.4g}")
        elif args.command == "check":
            report = check_command(args.scenario)
            print(json.dumps(report, indent=2, sort_keys=True))
            if report["eq24_ok"] is False:
                print(f"warning: g_dob exceeds the velocity-bandwidth limit {report['eq24_limit']:.4g} rad/s",
                      file=sys.stderr)
        else:
            for name in PRESETS:
                print(name)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
