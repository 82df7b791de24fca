"""Batch interface: configs, exit codes, artifacts, determinism."""

import json

import pytest

from hjbfolio.cli import main

BASE_CONFIG = {
    "model": {"name": "merton_constant", "params": {}},
    "grid": {"nodes": 21, "time_steps": 40,
             "box": {"lo": [-0.8, -2.0], "hi": [0.8, 2.0]}},
    "mc": {"seed": 7, "n_paths": 4000, "n_steps": 16},
    "eval_point": {"t0": 0.0, "x0": [0.0], "y0": [0.0], "w0": 1.0},
    "check": {"sample_count": 64},
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(BASE_CONFIG))
    return str(path)


def run(cmd, config_path, out_dir, *extra):
    return main([cmd, "--config", config_path, "--out", str(out_dir),
                 *extra])


def test_check_passes_and_writes_report(config_path, tmp_path):
    out = tmp_path / "out"
    assert run("check", config_path, out) == 0
    report = json.loads((out / "check_report.json").read_text())
    assert report["all_pass"] is True
    assert report["schema_version"] == 1


def test_check_fails_on_violated_bound(tmp_path):
    cfg = json.loads(json.dumps(BASE_CONFIG))
    cfg["check"]["bounds"] = {"B2_sigma": 1e-6}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert run("check", str(path), tmp_path / "out") == 1


def test_solve_artifacts(config_path, tmp_path):
    out = tmp_path / "out"
    assert run("solve", config_path, out) == 0
    for name in ("field.bin", "field.csv", "solve_summary.json"):
        assert (out / name).exists(), name
    summary = json.loads((out / "solve_summary.json").read_text())
    assert summary["u_at_point"] == pytest.approx(-0.125, abs=1e-6)
    assert summary["terminal_condition_pass"] is True
    assert summary["max_residual"] < 1e-10


def test_verify_after_solve(config_path, tmp_path):
    out = tmp_path / "out"
    assert run("solve", config_path, out) == 0
    assert run("verify", config_path, out) == 0
    report = json.loads((out / "verify_report.json").read_text())
    assert report["all_pass"] is True
    assert {"direct", "girsanov", "dual_value", "dual_gradient"} <= set(
        report["estimates"])


def test_verify_without_solve_is_usage_error(config_path, tmp_path):
    assert run("verify", config_path, tmp_path / "empty") == 2


def test_verify_pi_zero_flags_suboptimal(config_path, tmp_path):
    out = tmp_path / "out"
    run("solve", config_path, out)
    assert run("verify", config_path, out, "--pi-zero") == 1
    report = json.loads((out / "verify_report.json").read_text())
    assert report["policy_forced_zero"] is True
    assert report["flagged_suboptimal"] is True
    # With pi = 0 the wealth is deterministic: direct mean is exactly w^a/a.
    assert report["estimates"]["direct"]["mean"] == pytest.approx(2.0,
                                                                  abs=1e-12)


def test_unknown_config_key_rejected(tmp_path):
    cfg = json.loads(json.dumps(BASE_CONFIG))
    cfg["grdi"] = {}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert run("check", str(path), tmp_path / "out") == 2


def test_missing_section_rejected(tmp_path):
    cfg = json.loads(json.dumps(BASE_CONFIG))
    del cfg["mc"]
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert run("solve", str(path), tmp_path / "out") == 2


def test_malformed_json_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    assert run("check", str(path), tmp_path / "out") == 2


def test_sweep_writes_csv(config_path, tmp_path):
    out = tmp_path / "out"
    code = run("sweep", config_path, out, "--axis", "a",
               "--values", "[-1.0, 0.5]")
    assert code == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("a,")
    assert len(lines) == 3


def test_sweep_requires_axis(config_path, tmp_path):
    assert run("sweep", config_path, tmp_path / "out") == 2


def test_seed_override_changes_mc(config_path, tmp_path):
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    run("solve", config_path, out1)
    run("solve", config_path, out2)
    run("verify", config_path, out1, "--seed", "1")
    run("verify", config_path, out2, "--seed", "2")
    r1 = json.loads((out1 / "verify_report.json").read_text())
    r2 = json.loads((out2 / "verify_report.json").read_text())
    assert r1["estimates"]["direct"]["mean"] != \
        r2["estimates"]["direct"]["mean"]
    assert r1["seed"] == 1 and r2["seed"] == 2
