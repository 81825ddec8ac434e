import csv
import json
import shutil
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from dobstab.cli import csv_header, main, sweep_results, worker_count
from dobstab.dynamics import ConfigurationError
from dobstab.scenario import PRESETS, ScenarioError, load, preset_path, read_scenario, validate_summary, with_override


def short_scenario(tmp_path, name="theorem3_regulation", **sim):
    data = json.loads(preset_path(name).read_text())
    data["sim"].update({"duration": 0.5, **sim})
    path = tmp_path / f"{name}_short.json"
    path.write_text(json.dumps(data))
    return path


def write(tmp_path, data):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    return path


def test_run_outputs(tmp_path, capsys):
    src = short_scenario(tmp_path, duration=2.0)
    assert main(["run", str(src), "--out", str(tmp_path / "out")]) == 0
    assert "verdict: converged" in capsys.readouterr().out
    out = tmp_path / "out"
    with open(out / "run.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == csv_header(2)
    assert len(rows) == 2001 + 1
    summary = json.loads((out / "summary.json").read_text())
    validate_summary(summary)
    assert summary["n_rows"] == 2001 and summary["backend"] in ("cython", "python")
    table = np.loadtxt(out / "run.csv", delimiter=",", skiprows=1)
    assert summary["diagnostics"]["settled_max_e"] == pytest.approx(
        np.linalg.norm(table[table[:, 0] >= 1.6 - 1e-12][:, 3:5], axis=1).max())
    for svg in ("error_norm.svg", "lyapunov.svg", "lyapunov_rate.svg"):
        root = ET.parse(out / svg).getroot()
        assert root.tag.endswith("svg") and root.findall(".//{http://www.w3.org/2000/svg}polyline")


def test_summary_round_trip(tmp_path):
    src = short_scenario(tmp_path, "theorem2_circle", duration=1.2)
    main(["run", str(src), "--out", str(tmp_path / "o")])
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    scn = load(src)
    from dobstab.cli import execute, summary_dict
    again = json.loads(json.dumps(summary_dict(scn, execute(scn)), sort_keys=True))
    assert again == summary
    assert summary["gamma_prior"] is not None


def test_divergent_run_is_a_result(tmp_path, capsys):
    assert main(["run", "fig4a_unstable", "--out", str(tmp_path)]) == 0
    assert "divergent" in capsys.readouterr().out
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["diverged_at"] > 0


@pytest.mark.parametrize("mutate,fragment", [
    (lambda d: d["controller"].update(g_dob="fast"), "controller.g_dob"),
    (lambda d: d.pop("controller"), "controller"),
    (lambda d: d["sim"].update(noise_amplitude=1e-4), "seed"),
    (lambda d: d["model"]["links"][0].update(mass=-1.0), "model.links[0].mass"),
    (lambda d: d["sim"].update(bogus=1), "bogus"),
    (lambda d: d["controller"].update(M_n=[[1.0, 0.0], [0.0, -1.0]]), "controller.M_n"),
    (lambda d: d["controller"].update(M_n=[[1.0, 0.0, 0.0]] * 3), "controller.M_n"),
    (lambda d: d["disturbances"].update(load_steps=[{"t": 0.1, "tau": [9.0, 0.0]}], declared_load_bound=1.0),
     "disturbances"),
])
def test_invalid_scenarios_exit_2(tmp_path, capsys, mutate, fragment):
    data = json.loads(preset_path("theorem2_circle").read_text())
    mutate(data)
    code = main(["run", str(write(tmp_path, data)), "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert code == 2
    assert fragment in err


def test_malformed_json_and_missing_file(tmp_path, capsys):
    bad = tmp_path / "x.json"
    bad.write_text("{ not json")
    assert main(["check", str(bad)]) == 2
    assert "line 1" in capsys.readouterr().err
    assert main(["check", "no_such_preset"]) == 2


def test_check_reports_without_simulating(capsys):
    assert main(["check", "theorem2_circle"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["dominance"] == "dominant"
    assert report["eq24_ok"] is True
    assert report["gamma_prior"] > 0


def test_check_warns_on_bandwidth(capsys):
    assert main(["check", "fig8_offdiag_mn"]) == 0
    assert "velocity-bandwidth limit" in capsys.readouterr().err


def test_presets_listed(capsys):
    assert main(["presets"]) == 0
    assert capsys.readouterr().out.split() == list(PRESETS)
    for name in PRESETS:
        read_scenario(name)


def test_sweep_keeps_input_order(tmp_path, monkeypatch):
    src = short_scenario(tmp_path)
    monkeypatch.setenv("DOBSTAB_WORKERS", "2")
    assert worker_count() == 2
    rows = [r["row"] for r in sweep_results(src, "g_dob", [400.0, 100.0, 200.0])]
    assert [r["value"] for r in rows] == [400.0, 100.0, 200.0]
    serial = [r["row"] for r in sweep_results(src, "g_dob", [400.0, 100.0, 200.0], workers=1)]
    assert rows == serial


def test_sweep_command_files(tmp_path, capsys):
    src = short_scenario(tmp_path)
    assert main(["sweep", str(src), "--axis", "mn_scale", "--values", "1,2", "--out", str(tmp_path / "s")]) == 0
    lines = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("value,verdict")
    assert len(lines) == 3
    ET.parse(tmp_path / "s" / "error_norm_overlay.svg")
    ET.parse(tmp_path / "s" / "dynamic_error_overlay.svg")
    assert main(["sweep", str(src), "--axis", "g_dob", "--values", "1,x", "--out", str(tmp_path)]) == 2
    assert main(["sweep", str(src), "--axis", "g_dob", "--values", "-5", "--out", str(tmp_path)]) == 2


def test_bad_worker_env(monkeypatch):
    monkeypatch.setenv("DOBSTAB_WORKERS", "zero")
    with pytest.raises(ConfigurationError):
        worker_count()


def test_overrides():
    data = read_scenario("fig8_offdiag_mn")
    assert with_override(data, "mn_scale", 2.0)["controller"]["mn_scale"] == 2.0
    assert with_override(data, "mn_offdiag_scale", 0.25)["controller"]["mn_offdiag_scale"] == 0.25
    assert data["controller"]["mn_offdiag_scale"] == 0.5
    with pytest.raises(ScenarioError):
        with_override(data, "K_P", 1.0)


def test_console_script(tmp_path):
    exe = shutil.which("dobstab")
    cmd = [exe] if exe else [sys.executable, "-m", "dobstab.cli"]
    res = subprocess.run(cmd + ["presets"], capture_output=True, text=True)
    assert res.returncode == 0 and "theorem3_regulation" in res.stdout


def test_nominal_inertia_sweep_crosses_into_stability():
    rows = [r["row"] for r in sweep_results("fig9_bandwidth_x_inertia", "mn_scale", [0.1, 1.0], workers=1)]
    assert [r["verdict"] for r in rows] == ["divergent", "bounded"]


def test_empty_sweep_values(tmp_path, capsys):
    assert main(["sweep", "theorem3_regulation", "--axis", "g_dob", "--values", ",", "--out", str(tmp_path)]) == 2
    assert "values" in capsys.readouterr().err


def test_check_examples(tmp_path, capsys):
    data = json.loads(preset_path("fig8_offdiag_mn").read_text())
    data["controller"].update(M_n=(1e3 * np.eye(3)).tolist(), mn_offdiag_scale=1.0)
    assert main(["check", str(write(tmp_path, data))]) == 0
    captured = capsys.readouterr()
    report = json.loads(captured.out)
    assert report["dominance"] == "dominant"
    assert report["eq24_ok"] is False and "warning" in captured.err
    assert report["betas"]["beta_g"] == 0.0
