"""JSON scenario files: validation and construction of the run objects."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from dobstab.analysis import AnalysisConfig
from dobstab.bounds import WorkspaceBox, estimate_betas
from dobstab.controller import ControllerConfig
from dobstab.dynamics import GCM2_TO_KGM2, ConfigurationError, LinkParams, ManipulatorModel
from dobstab.reference import Reference, operational_to_joint
from dobstab.simulation import DisturbanceSchedule, SimConfig

PRESETS = (
    "theorem3_regulation",
    "theorem2_circle",
    "fig4a_unstable",
    "fig6_diag_mn_sweep",
    "fig8_offdiag_mn",
    "fig9_bandwidth_x_inertia",
)


class ScenarioError(ConfigurationError):
    """Invalid scenario file; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def _schema(name: str) -> dict:
    return json.loads(resources.files("dobstab").joinpath("schema", name).read_text())


def preset_path(name: str):
    return resources.files("dobstab").joinpath("presets", f"{name}.json")


def read_scenario(source) -> dict:
    """Load a scenario from a file path or a preset name and validate it."""
    path = Path(source)
    if path.is_file():
        text = path.read_text()
    elif str(source) in PRESETS:
        text = preset_path(str(source)).read_text()
    else:
        raise ScenarioError("", f"no such scenario file or preset: {source}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"line {exc.lineno} column {exc.colno}", f"invalid JSON: {exc.msg}")
    validate_scenario(data)
    return data


def _format_path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def validate_scenario(data: dict, schema: str = "scenario.schema.json") -> None:
    validator = jsonschema.Draft202012Validator(_schema(schema))
    errors = sorted(validator.iter_errors(data), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        # oneOf failures are more useful reported through their closest sub-error
        if err.context:
            err = min(err.context, key=lambda e: -len(e.absolute_path))
        raise ScenarioError(_format_path(err.absolute_path), err.message)


def validate_summary(data: dict) -> None:
    validate_scenario(data, "summary.schema.json")


@dataclass(frozen=True)
class Scenario:
    name: str
    model: ManipulatorModel
    controller: ControllerConfig
    reference: Reference
    disturbances: DisturbanceSchedule
    sim: SimConfig
    analysis: AnalysisConfig
    a_priori_suprema: dict | None
    plots: bool = True


def _vec(value, n, path):
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return np.full(n, float(a))
    if a.shape != (n,):
        raise ScenarioError(path, f"expected {n} entries, got {a.size}")
    return a


def _model(d: dict) -> ManipulatorModel:
    unit = GCM2_TO_KGM2 if d.get("inertia_unit") == "g*cm^2" else 1.0
    links = []
    for i, link in enumerate(d["links"]):
        try:
            links.append(LinkParams(link["length"], link["mass"],
                                    link.get("com_offset", link["length"] / 2),
                                    link["inertia_com"] * unit))
        except ConfigurationError as exc:
            raise ScenarioError(f"model.links[{i}]", str(exc)) from None
    n = len(links)
    fields = {}
    for key in ("viscous_friction", "coulomb_friction", "armature"):
        if key in d:
            fields[key] = tuple(_vec(d[key], n, f"model.{key}"))
    try:
        return ManipulatorModel(tuple(links), d.get("gravity_accel", 0.0),
                                coulomb_eps=d.get("coulomb_eps", 1e-3), **fields)
    except ConfigurationError as exc:
        raise ScenarioError("model", str(exc)) from None


def _box(d: dict | None, n: int) -> WorkspaceBox | None:
    if d is None:
        return None
    try:
        return WorkspaceBox(
            tuple(_vec(d.get("q_min", -np.pi), n, "analysis.workspace.q_min")),
            tuple(_vec(d.get("q_max", np.pi), n, "analysis.workspace.q_max")),
            tuple(_vec(d["qdot_max"], n, "analysis.workspace.qdot_max")),
            d.get("grid_points", 25),
        )
    except ScenarioError:
        raise
    except ConfigurationError as exc:
        raise ScenarioError("analysis.workspace", str(exc)) from None


def nominal_inertia(c: dict, model: ManipulatorModel, box: WorkspaceBox | None) -> np.ndarray:
    """Resolve ``controller.M_n`` with the diagonal and off-diagonal scalings."""
    n = model.n
    spec = c["M_n"]
    if isinstance(spec, dict):
        probe = ControllerConfig(np.eye(n), 1.0, 1.0, 1.0)
        betas = estimate_betas(model, probe, box or WorkspaceBox.full(n))
        base = getattr(betas, spec["scaled_identity_of"]) * spec["factor"] * np.eye(n)
    else:
        base = np.asarray(spec, dtype=float)
        if base.shape != (n, n):
            raise ScenarioError("controller.M_n", f"expected a {n}x{n} matrix, got shape {base.shape}")
    diag = np.diag(np.diag(base))
    return c.get("mn_scale", 1.0) * (diag + c.get("mn_offdiag_scale", 1.0) * (base - diag))


def _controller(c: dict, model: ManipulatorModel, box) -> ControllerConfig:
    n = model.n
    Mn = nominal_inertia(c, model, box)
    try:
        cfg = ControllerConfig(Mn, _vec(c["g_dob"], n, "controller.g_dob"),
                               _vec(c["K_D"], n, "controller.K_D"), _vec(c["K_P"], n, "controller.K_P"),
                               c.get("g_v", 0.0),
                               None if c.get("tau_max") is None else _vec(c["tau_max"], n, "controller.tau_max"))
        cfg.validate()
    except ScenarioError:
        raise
    except ConfigurationError as exc:
        raise ScenarioError("controller.M_n" if "M_n" in str(exc) else "controller", str(exc)) from None
    return cfg


def _reference(r: dict, model: ManipulatorModel, duration: float) -> Reference:
    n = model.n
    kind = r["kind"]
    try:
        if kind in ("step-regulation", "smoothed-step"):
            if "target" not in r:
                raise ScenarioError("reference.target", "required for step references")
            target = _vec(r["target"], n, "reference.target")
            start = _vec(r.get("start", r["target"]), n, "reference.start")
            return Reference(kind, start=start, target=target, t_step=r.get("t_step", 0.0),
                             smoothing=r.get("smoothing", 0.02))
        if kind == "joint-circle":
            for key in ("center", "amplitude", "period"):
                if key not in r:
                    raise ScenarioError(f"reference.{key}", "required for joint-circle")
            return Reference(kind, center=_vec(r["center"], n, "reference.center"),
                             amplitude=_vec(r["amplitude"], n, "reference.amplitude"),
                             phase=_vec(r.get("phase", 0.0), n, "reference.phase"),
                             period=r["period"])
        if kind == "operational-circle":
            for key in ("center", "radius", "period"):
                if key not in r:
                    raise ScenarioError(f"reference.{key}", "required for operational-circle")
            return operational_to_joint(
                model, _vec(r["center"], 2, "reference.center"), r["radius"], r["period"], duration,
                samples_per_period=r.get("samples_per_period", 2000),
                phase=float(r.get("phase", 0.0)), seed=r.get("ik_seed"),
                damping=r.get("ik_damping", 1e-3))
        if "times" not in r or "samples" not in r:
            raise ScenarioError("reference", "custom-samples needs times and samples")
        samples = np.asarray(r["samples"], dtype=float)
        if samples.ndim != 2 or samples.shape[1] != n:
            raise ScenarioError("reference.samples", f"expected rows of {n} joint values")
        return Reference(kind, times=r["times"], samples=samples)
    except ScenarioError:
        raise
    except ConfigurationError as exc:
        raise ScenarioError("reference", str(exc)) from None


def build_scenario(data: dict, name: str = "scenario") -> Scenario:
    """Turn a validated scenario document into run objects."""
    model = _model(data["model"])
    n = model.n
    a = data.get("analysis", {})
    box = _box(a.get("workspace"), n)
    cfg = _controller(data["controller"], model, box)
    s = data["sim"]
    try:
        sim = SimConfig(
            dt=s["dt"], duration=s["duration"], integrator=s.get("integrator", "rk4"),
            divergence_threshold=s.get("divergence_threshold", 10.0),
            log_decimation=s.get("log_decimation", 1), mode=s.get("mode", "continuous"),
            noise_amplitude=(tuple(_vec(s["noise_amplitude"], n, "sim.noise_amplitude"))
                             if isinstance(s.get("noise_amplitude"), list) else s.get("noise_amplitude", 0.0)),
            seed=s.get("seed"),
            initial_error=tuple(_vec(s["initial_error"], n, "sim.initial_error")) if "initial_error" in s else (),
            initial_velocity_error=(tuple(_vec(s["initial_velocity_error"], n, "sim.initial_velocity_error"))
                                    if "initial_velocity_error" in s else ()),
        )
    except ScenarioError:
        raise
    except ConfigurationError as exc:
        raise ScenarioError("sim", str(exc)) from None
    ref = _reference(data["reference"], model, sim.duration)
    if ref.n != n:
        raise ScenarioError("reference", f"reference has {ref.n} joints, model has {n}")
    d = data.get("disturbances", {})
    steps = []
    for i, step in enumerate(d.get("load_steps", [])):
        steps.append((step["t"], tuple(_vec(step["tau"], n, f"disturbances.load_steps[{i}].tau"))))
    try:
        dist = DisturbanceSchedule(tuple(steps), d.get("declared_load_bound"))
        acfg = AnalysisConfig(settle_fraction=a.get("settle_fraction", 0.2), e_tol=a.get("e_tol", 1e-3),
                              eD_tol=a.get("eD_tol", 1e-2), box=box,
                              velocity_bandwidth=a.get("velocity_bandwidth"))
    except ConfigurationError as exc:
        raise ScenarioError("disturbances" if "load" in str(exc) else "analysis", str(exc)) from None
    return Scenario(data.get("name", name), model, cfg, ref, dist, sim, acfg,
                    a.get("a_priori_suprema"), data.get("output", {}).get("plots", True))


def with_override(data: dict, axis: str, value: float) -> dict:
    """Copy of a scenario document with one sweep axis set to ``value``."""
    out = copy.deepcopy(data)
    c = out["controller"]
    if axis == "g_dob":
        c["g_dob"] = value
    elif axis == "mn_scale":
        c["mn_scale"] = c.get("mn_scale", 1.0) * value
    elif axis == "mn_offdiag_scale":
        c["mn_offdiag_scale"] = value
    else:
        raise ScenarioError("axis", f"unknown sweep axis {axis!r}")
    return out


def load(source) -> Scenario:
    data = read_scenario(source)
    return build_scenario(data, Path(str(source)).stem)
