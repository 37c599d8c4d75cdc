"""CLI contract: strict configs, exit codes, reproducible outputs."""

import json
import subprocess
import sys

import pytest

from cbftune.cli import (EXIT_CONFIG, EXIT_OK, EXIT_STALLED, load_config,
                         main)


def _write_config(tmp_path, payload, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def _grid_config(tmp_path, **overrides):
    payload = {
        "schema": 1,
        "seed": 0,
        "out_dir": str(tmp_path / "out"),
        "model": {"kind": "car", "c": 0.3, "dt": 0.01},
        "rfggd": {},
        "experiment": {"kind": "car-grid",
                       "a_range": [0.001, 5.0, 6],
                       "b_range": [0.001, 5.0, 6],
                       "x0": 0.5, "horizon_cap": 30},
    }
    payload.update(overrides)
    return _write_config(tmp_path, payload)


# --- config validation --------------------------------------------------------

def test_rejects_unknown_top_level_key(tmp_path, capsys):
    cfg = _grid_config(tmp_path, bogus=1)
    assert main(["car-grid", "--config", cfg]) == EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err


def test_rejects_wrong_schema(tmp_path, capsys):
    cfg = _grid_config(tmp_path, schema=2)
    assert main(["car-grid", "--config", cfg]) == EXIT_CONFIG
    assert "schema" in capsys.readouterr().err


def test_rejects_unknown_experiment_key(tmp_path, capsys):
    payload = json.loads(open(_grid_config(tmp_path)).read())
    payload["experiment"]["mystery"] = True
    cfg = _write_config(tmp_path, payload)
    assert main(["car-grid", "--config", cfg]) == EXIT_CONFIG
    assert "mystery" in capsys.readouterr().err


def test_rejects_kind_mismatch(tmp_path, capsys):
    cfg = _grid_config(tmp_path)
    assert main(["car-rfggd", "--config", cfg]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "kind" in err


def test_rejects_missing_file(tmp_path, capsys):
    assert main(["car-grid", "--config", str(tmp_path / "nope.json")]) \
        == EXIT_CONFIG


def test_rejects_malformed_json(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert main(["car-grid", "--config", str(path)]) == EXIT_CONFIG
    assert "invalid JSON" in capsys.readouterr().err


def test_rejects_bad_rfggd_value(tmp_path, capsys):
    cfg = _grid_config(tmp_path, rfggd={"learning_rate": -1.0})
    assert main(["car-grid", "--config", cfg]) == EXIT_CONFIG


def test_rejects_unknown_model_kind(tmp_path, capsys):
    cfg = _grid_config(tmp_path, model={"kind": "boat"})
    assert main(["car-grid", "--config", cfg]) == EXIT_CONFIG


def test_load_config_round_trip(tmp_path):
    cfg = load_config(_grid_config(tmp_path))
    assert cfg.seed == 0
    assert cfg.model["kind"] == "car"
    assert cfg.rfggd.learning_rate == 1.0


# --- car-grid ------------------------------------------------------------------

def test_car_grid_outputs_and_rerun_identical(tmp_path, capsys):
    cfg = _grid_config(tmp_path)
    assert main(["car-grid", "--config", cfg, "--quiet"]) == EXIT_OK
    out = tmp_path / "out" / "grid.csv"
    first = out.read_bytes()
    lines = first.decode().splitlines()
    assert lines[0] == "a,b,feasible_steps"
    assert len(lines) == 1 + 36
    assert main(["car-grid", "--config", cfg, "--quiet"]) == EXIT_OK
    assert out.read_bytes() == first


def test_car_grid_out_override(tmp_path):
    cfg = _grid_config(tmp_path)
    other = tmp_path / "elsewhere"
    assert main(["car-grid", "--config", cfg, "--out", str(other),
                 "--quiet"]) == EXIT_OK
    assert (other / "grid.csv").exists()


# --- car-rfggd -------------------------------------------------------------------

def _rfggd_config(tmp_path, inits, **rfggd):
    payload = {
        "schema": 1,
        "seed": 0,
        "out_dir": str(tmp_path / "out"),
        "model": {"kind": "car", "c": 0.3, "dt": 0.01},
        "rfggd": rfggd,
        "experiment": {"kind": "car-rfggd", "x0": 0.5, "horizon_cap": 40,
                       "case1_steps": 2, "theta_inits": inits},
    }
    return _write_config(tmp_path, payload)


def test_car_rfggd_outputs(tmp_path):
    cfg = _rfggd_config(tmp_path, [[0.002, 0.004], [0.5, 0.5]])
    assert main(["car-rfggd", "--config", cfg, "--quiet"]) == EXIT_OK
    iters = (tmp_path / "out" / "iterates.csv").read_text().splitlines()
    feas = (tmp_path / "out" / "feasibility.csv").read_text().splitlines()
    assert iters[0] == "init_id,iteration,phase,a,b"
    assert feas[0] == "init_id,iteration,feasible_steps"
    assert len(iters) == len(feas)
    # both inits appear
    ids = {line.split(",")[0] for line in iters[1:]}
    assert ids == {"0", "1"}
    # feasibility column is nondecreasing per init
    per_init = {}
    for line in feas[1:]:
        sid, _, steps = line.split(",")
        per_init.setdefault(sid, []).append(int(steps))
    for seq in per_init.values():
        assert all(x <= y for x, y in zip(seq, seq[1:]))


def test_car_rfggd_stall_exit_code(tmp_path):
    cfg = _rfggd_config(tmp_path, [[0.002, 0.002]],
                        learning_rate=1e-12, max_case2_iters=2)
    assert main(["car-rfggd", "--config", cfg, "--quiet"]) == EXIT_STALLED
    # outputs are still written for inspection
    assert (tmp_path / "out" / "iterates.csv").exists()


# --- follow ---------------------------------------------------------------------

def test_follow_outputs(tmp_path):
    payload = {
        "schema": 1,
        "seed": 0,
        "out_dir": str(tmp_path / "out"),
        "model": {"kind": "unicycle", "dt": 0.02},
        "rfggd": {"lookahead": 8},
        "experiment": {"kind": "follow", "sim_steps": 12,
                       "theta0": {"clf_rate": 0.5,
                                  "cbf_rates": [0.5, 0.5, 0.5]}},
    }
    cfg = _write_config(tmp_path, payload)
    assert main(["follow", "--config", cfg, "--quiet"]) == EXIT_OK
    adaptive = (tmp_path / "out" / "adaptive.csv").read_text().splitlines()
    baseline = (tmp_path / "out" / "baseline.csv").read_text().splitlines()
    rewards = (tmp_path / "out" / "rewards.csv").read_text().splitlines()
    assert len(adaptive) == 1 + 12
    assert len(baseline) == 1 + 12
    assert adaptive[0] == baseline[0]
    assert adaptive[0].startswith("t,x,y,psi,v,omega,")
    assert rewards[0] == "t,adaptive_J,baseline_J"
    assert rewards[-1].startswith("total,")
    # first simulated instant acts identically in both runs
    assert adaptive[1] == baseline[1]


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "cbftune.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("car-grid", "car-rfggd", "follow"):
        assert sub in proc.stdout
