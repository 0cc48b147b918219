import csv
import json
import subprocess

import numpy as np
import pytest

from hawkes_st.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, derive_seed, main
from hawkes_st.config import ConfigError, parse_config

TRUTH = {"d": 1, "a": 0.1, "b": 0.1, "cells": 8, "mu": {"constant": 2.0}, "g": {"branching_ratio": 0.3}}


def write_config(path, **sections):
    cfg = {"format_version": 1, "seed": 7, "truth": TRUTH}
    cfg.update(sections)
    path.write_text(json.dumps(cfg))
    return path


def run(cmd, cfg_path, out):
    return main([cmd, "--config", str(cfg_path), "--out", str(out)])


def test_simulate_writes_events_truth_and_manifest(tmp_path):
    cfg = write_config(tmp_path / "c.json", sim={"n": 25})
    assert run("simulate", cfg, tmp_path / "o") == EXIT_OK
    out = tmp_path / "o"
    assert {p.name for p in out.iterdir()} >= {"events.csv", "truth.json", "manifest.json"}
    manifest = json.loads((out / "manifest.json").read_text())
    with open(out / "events.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["seq_id", "t", "s1"]
    assert len(rows) - 1 == manifest["n_events"]
    assert manifest["n_sequences"] == 25 and manifest["seed"] == 7


def test_simulate_is_deterministic_and_seed_sensitive(tmp_path):
    cfg = write_config(tmp_path / "c.json", sim={"n": 25})
    run("simulate", cfg, tmp_path / "a")
    run("simulate", cfg, tmp_path / "b")
    a = (tmp_path / "a" / "events.csv").read_bytes()
    assert a == (tmp_path / "b" / "events.csv").read_bytes()
    other = json.loads(cfg.read_text())
    other["seed"] = 8
    (tmp_path / "d.json").write_text(json.dumps(other))
    run("simulate", tmp_path / "d.json", tmp_path / "d")
    assert a != (tmp_path / "d" / "events.csv").read_bytes()


def test_derived_seeds_are_distinct_per_stage():
    assert len({derive_seed(7, tag) for tag in range(5)}) == 5
    assert derive_seed(7, 1) == derive_seed(7, 1) < 2**63


def test_finite_range_constraint_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", truth=dict(TRUTH, a=0.6), sim={"n": 5})
    assert run("simulate", cfg, tmp_path / "o") == EXIT_CONFIG
    assert "finite-range" in capsys.readouterr().err


@pytest.mark.parametrize(
    "patch",
    [{"sim": {"n": 5, "bogus": 1}}, {"format_version": 2}, {"sim": {"n": 0}}, {"checks": {"enabled": []}}],
)
def test_invalid_configs_exit_with_code_two(tmp_path, patch):
    cfg = {"format_version": 1, "seed": 1, "truth": TRUTH}
    cfg.update(patch)
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("simulate", tmp_path / "c.json", tmp_path / "o") == EXIT_CONFIG


def test_error_messages_name_the_field():
    with pytest.raises(ConfigError, match=r"sim\.n"):
        parse_config({"sim": {"n": -1}})
    with pytest.raises(ConfigError, match="enabled"):
        parse_config({"checks": {"enabled": []}})


def test_unreadable_config_exits_with_code_two(tmp_path):
    assert main(["fit", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text("{ not json")
    assert main(["fit", "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG


def test_fit_against_simulated_data_reports_errors_to_truth(tmp_path):
    out = tmp_path / "o"
    cfg = write_config(tmp_path / "c.json", sim={"n": 40}, fit={"method": "map", "mu_cells": 4, "g_cells": 4, "iterations": 50})
    assert run("simulate", cfg, out) == EXIT_OK
    assert run("fit", cfg, out) == EXIT_OK
    post = json.loads((out / "posterior.json").read_text())
    assert post["l1_error"] is not None and post["l1_error"] >= 0
    assert post["ds_error"] is not None
    with open(out / "trace.csv") as fh:
        trace = list(csv.DictReader(fh))
    objective = [float(r["objective"]) for r in trace]
    assert np.all(np.diff(objective) >= 0)


def test_fit_without_events_is_a_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", fit={"method": "map"})
    assert run("fit", cfg, tmp_path / "o") == EXIT_CONFIG
    assert "events" in capsys.readouterr().err


def test_fit_reports_malformed_event_line(tmp_path, capsys):
    events = tmp_path / "e.csv"
    events.write_text("seq_id,t,s1\n0,0.1,0.2\n0,0.3,oops\n")
    cfg = write_config(tmp_path / "c.json", fit={"method": "map", "events": str(events)})
    assert run("fit", cfg, tmp_path / "o") == EXIT_CONFIG
    assert "line 3" in capsys.readouterr().err


def test_check_passes_and_writes_reports(tmp_path):
    cfg = write_config(tmp_path / "c.json", checks={"enabled": ["identifiability"], "identifiability": {"n": 200}})
    assert run("check", cfg, tmp_path / "o") == EXIT_OK
    rep = json.loads((tmp_path / "o" / "identifiability.json").read_text())
    assert rep["verdict"] == "PASS"
    assert (tmp_path / "o" / "identifiability.csv").exists()


def test_check_fail_verdict_exits_with_code_one(tmp_path):
    cfg = write_config(
        tmp_path / "c.json",
        checks={"enabled": ["kl_bound"], "kl_bound": {"eps": 0.05, "n": 20, "replicates": 30, "slack": 0.0, "lambda02_sequences": 50}},
    )
    code = run("check", cfg, tmp_path / "o")
    rep = json.loads((tmp_path / "o" / "kl_bound.json").read_text())
    assert code == (EXIT_OK if rep["verdict"] == "PASS" else EXIT_FAIL)
    bad = write_config(
        tmp_path / "bad.json",
        checks={"enabled": ["identifiability"], "identifiability": {"n": 2, "mu_scale": 1.0001}},
    )
    assert run("check", bad, tmp_path / "bad") == EXIT_FAIL


def test_bernstein_budget_violation_surfaces_measured_value(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", checks={"enabled": ["bernstein"], "bernstein": {"v": 2.01, "replicates": 500}})
    assert run("check", cfg, tmp_path / "o") == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "measured" in err and "v=2.01" in err


def test_contraction_writes_curve_and_theoretical_exponent(tmp_path):
    truth = {"d": 2, "a": 0.2, "b": 0.2, "cells": 3,
             "mu": {"kernel": {"family": "matern", "smoothness": 2.0}},
             "g": {"branching_ratio": 0.2}}
    fit = {"method": "pcn", "mu_cells": 3, "iterations": 60, "burn_in": 20, "thin": 2}
    cfg = write_config(tmp_path / "c.json", truth=truth, contraction={"ns": [2, 4, 8], "fit": fit})
    assert run("contraction", cfg, tmp_path / "o") == EXIT_OK
    slope = json.loads((tmp_path / "o" / "slope.json").read_text())
    assert slope["theoretical_exponent"] == pytest.approx(-2 / 7)
    with open(tmp_path / "o" / "contraction.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["n"]) for r in rows] == [2, 4, 8]


def test_contraction_sizes_must_increase(tmp_path):
    cfg = write_config(tmp_path / "c.json", contraction={"ns": [10, 40, 20]})
    assert run("contraction", cfg, tmp_path / "o") == EXIT_CONFIG


def test_manifest_replay_reproduces_outputs(tmp_path):
    cfg = write_config(tmp_path / "c.json", sim={"n": 30}, fit={"method": "vi", "mu_cells": 4, "g_cells": 4, "iterations": 30})
    run("simulate", cfg, tmp_path / "a")
    run("fit", cfg, tmp_path / "a")
    run("simulate", tmp_path / "a" / "manifest.json", tmp_path / "b")
    # fit manifests overwrite the simulate one; replay from the config echoed in either
    run("fit", tmp_path / "a" / "manifest.json", tmp_path / "b")
    assert (tmp_path / "a" / "events.csv").read_bytes() == (tmp_path / "b" / "events.csv").read_bytes()
    pa = json.loads((tmp_path / "a" / "posterior.json").read_text())["point"]
    pb = json.loads((tmp_path / "b" / "posterior.json").read_text())["point"]
    for key in ("mu_values", "g_values"):
        assert np.max(np.abs(np.array(pa[key]) - np.array(pb[key]))) <= 1e-12


def test_threads_env_overrides_config(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.json", threads=2, sim={"n": 5})
    monkeypatch.setenv("HAWKES_ST_THREADS", "3")
    run("simulate", cfg, tmp_path / "o")
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["threads"] == 3
    monkeypatch.setenv("HAWKES_ST_THREADS", "zero")
    assert run("simulate", cfg, tmp_path / "o") == EXIT_CONFIG
    monkeypatch.delenv("HAWKES_ST_THREADS")
    run("simulate", cfg, tmp_path / "o")
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["threads"] == 2


def test_console_script_entry_point(tmp_path):
    cfg = write_config(tmp_path / "c.json", sim={"n": 3})
    proc = subprocess.run(["hawkes-st", "simulate", "--config", str(cfg), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True, env={"HAWKES_ST_THREADS": "1", "PATH": "/usr/local/bin:/usr/bin:/bin"})
    assert proc.returncode == 0, proc.stderr
    bad = subprocess.run(["hawkes-st", "simulate", "--config", str(tmp_path / "nope.json")], capture_output=True, text=True)
    assert bad.returncode == 2


def test_all_checks_on_default_toy_exit_zero(tmp_path):
    checks = {
        "enabled": ["omega_event", "bernstein", "kl_bound", "identifiability"],
        "omega_event": {"n_values": [50, 200], "replicates": 60},
        "bernstein": {"rule": "stopped", "v": 3.0, "replicates": 5000},
        "kl_bound": {"n": 20, "replicates": 50, "lambda02_sequences": 100},
        "identifiability": {"n": 300},
    }
    cfg = write_config(tmp_path / "c.json", checks=checks)
    assert run("check", cfg, tmp_path / "o") == EXIT_OK
    verdicts = json.loads((tmp_path / "o" / "manifest.json").read_text())["verdicts"]
    assert set(verdicts) == set(checks["enabled"]) and set(verdicts.values()) == {"PASS"}


def test_contraction_d1_slope_negative(tmp_path):
    truth = dict(TRUTH, a=0.2, b=0.2, cells=4)
    fit = {"method": "pcn", "iterations": 1500, "burn_in": 500, "thin": 5,
           "g_link": {"kind": "scaled_sigmoid", "ceiling": 8.0}}
    cfg = write_config(tmp_path / "c.json", truth=truth, contraction={"ns": [5, 20, 80], "replicates": 2, "fit": fit})
    assert run("contraction", cfg, tmp_path / "o") == EXIT_OK
    assert json.loads((tmp_path / "o" / "slope.json").read_text())["slope"] < 0
