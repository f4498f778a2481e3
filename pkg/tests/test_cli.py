import json
import math
import os

import pytest

from leakybilliards import cli
from leakybilliards.errors import ConfigError


def write_cfg(tmp_path, name, cfg):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def run(tmp_path, sub, cfg, *extra, outdir="out"):
    cfg_path = write_cfg(tmp_path, f"{sub}.json", cfg)
    out = tmp_path / outdir
    out.mkdir(exist_ok=True)
    code = cli.main([sub, "--config", cfg_path, "--out", str(out), *extra])
    return code, out


def read_results(out):
    with open(out / "results.json") as fh:
        return json.load(fh)


def test_validate_geometry(tmp_path, capsys):
    code, out = run(tmp_path, "validate-geometry", {"seed": 1})
    assert code == 0
    res = read_results(out)
    assert res["status"] == "ok"
    assert res["n_scatterers"] == 2
    assert math.isclose(res["total_perimeter"], 2 * math.pi * 0.6,
                        rel_tol=1e-12)
    assert math.isclose(res["l_max"], 1.6314900802675691, rel_tol=1e-9)
    assert res["master_seed"] == 1
    assert len(res["config_hash"]) == 64
    paths = capsys.readouterr().out.strip().splitlines()
    assert paths == [str(out / "results.json")]


def test_simulate_closed(tmp_path):
    code, out = run(tmp_path, "simulate", {
        "hole": None, "n_particles": 2000, "n_max": 10, "seed": 3,
    })
    assert code == 0
    res = read_results(out)
    assert res["escaped_final"] == 0
    assert res["survivors_final"] + res["censored_final"] == 2000
    counts = (out / "counts.csv").read_text().splitlines()
    assert counts[0].startswith("# config_hash=")
    assert counts[1].startswith("# master_seed=")
    assert counts[2] == "step,survivors,escaped,censored,eff_survivors"
    assert len(counts) == 3 + 11


ESCAPE_CFG = {
    "hole": {"kind": "I", "anchor": [0, 0.3], "h": 0.15},
    "density": {"kind": "nu"},
    "n_particles": 20000,
    "n_max": 30,
    "window": [5, 25],
    "seed": 11,
    "estimator": "direct",
}


def test_escape_rate_contract(tmp_path):
    code, out = run(tmp_path, "escape-rate", ESCAPE_CFG)
    assert code == 0
    res = read_results(out)
    for key in ("theta_hat", "log_slope", "stderr", "window",
                "counts_csv_path", "seed", "config_hash", "master_seed"):
        assert key in res
    assert 0.8 < res["theta_hat"] < 1.0
    assert res["window"] == [5, 25]
    assert res["counts_csv_path"] == "counts.csv"
    assert (out / "counts.csv").exists()


def test_escape_rate_reruns_byte_identical(tmp_path):
    _, out1 = run(tmp_path, "escape-rate", ESCAPE_CFG, outdir="o1")
    _, out2 = run(tmp_path, "escape-rate", ESCAPE_CFG, outdir="o2")
    assert (out1 / "results.json").read_bytes() == \
        (out2 / "results.json").read_bytes()
    assert (out1 / "counts.csv").read_bytes() == \
        (out2 / "counts.csv").read_bytes()


def test_thread_count_does_not_change_artifacts(tmp_path):
    _, out1 = run(tmp_path, "escape-rate", ESCAPE_CFG, "--threads", "1",
                  outdir="t1")
    _, out2 = run(tmp_path, "escape-rate", ESCAPE_CFG, "--threads", "4",
                  outdir="t4")
    assert (out1 / "results.json").read_bytes() == \
        (out2 / "results.json").read_bytes()
    assert (out1 / "counts.csv").read_bytes() == \
        (out2 / "counts.csv").read_bytes()


def test_seed_override_changes_run(tmp_path):
    _, out1 = run(tmp_path, "escape-rate", ESCAPE_CFG, outdir="s1")
    _, out2 = run(tmp_path, "escape-rate", ESCAPE_CFG, "--seed", "999",
                  outdir="s2")
    r1, r2 = read_results(out1), read_results(out2)
    assert r2["master_seed"] == 999
    assert r1["config_hash"] != r2["config_hash"]
    assert r1["theta_hat"] != r2["theta_hat"]


def test_fleming_viot_estimator(tmp_path):
    cfg = dict(ESCAPE_CFG, estimator="fleming-viot")
    code, out = run(tmp_path, "escape-rate", cfg)
    assert code == 0
    res = read_results(out)
    assert 0.8 < res["theta_hat"] < 1.0


def test_survivor_measure(tmp_path):
    code, out = run(tmp_path, "survivor-measure", {
        "hole": {"kind": "I", "anchor": [0, 0.3], "h": 0.05},
        "n_particles": 20000, "n_steps": 8, "r_bins": 16, "phi_bins": 16,
        "seed": 5, "min_survivors": 500,
    })
    assert code == 0
    res = read_results(out)
    assert res["survivors"] > 500
    assert res["distance_to_nu"] > 0
    assert res["noise_floor"] > 0
    assert (out / "measure.csv").exists()
    assert (out / "counts.csv").exists()


def test_small_hole_sweep(tmp_path):
    code, out = run(tmp_path, "small-hole-sweep", {
        "hole_family": {"anchor": [0, 0.3], "h_list": [0.08, 0.04],
                        "kind": "I"},
        "n_particles": 20000, "n_max": 30, "window": [5, 25],
        "measure_step": 10, "r_bins": 16, "phi_bins": 16, "seed": 7,
    })
    assert code == 0
    res = read_results(out)
    assert len(res["rows"]) == 2
    assert res["rows"][1]["theta_hat"] > res["rows"][0]["theta_hat"]
    sweep = (out / "sweep.csv").read_text().splitlines()
    assert sweep[2].startswith("h,theta_hat,")


def test_singularity_diag(tmp_path):
    code, out = run(tmp_path, "singularity-diag", {
        "hole": {"kind": "I", "anchor": [0, 0.3], "h": 0.15},
        "k_steps": 10, "n_particles": 10000, "seed": 9,
        "n_backcheck": 200, "k_backcheck": 5,
    })
    assert code == 0
    res = read_results(out)
    assert 0 < res["fraction_entered"] < 1
    assert res["survivor_hole_mass"] == 0.0
    assert res["backward_violations"] == 0


def test_tower_eig_golden(tmp_path):
    code, out = run(tmp_path, "tower-eig", {"tower": {"builtin": "golden"},
                                            "seed": 0})
    assert code == 0
    res = read_results(out)
    assert abs(res["theta_star"] - 0.8090169943749475) < 1e-10
    assert res["oracle_abs_diff"] < 1e-10
    assert abs(res["d_h_star"] - 1.0) < 1e-8
    assert res["h_star"]["0,0"] == 0.0
    assert abs(res["h_star"]["0,1"] - 0.9442719099991588) < 1e-9


def test_tower_bound_json_spec(tmp_path):
    cfg = {
        "tower": {
            "levels": [{"cells": [
                {"mass": 0.99, "return": 1},
                {"mass": 0.01, "return": 2},
            ]}],
            "hole": [[1, 1]],
            "beta": 0.8, "C0": 2.0, "theta0": 0.5, "C1": 1.0,
        },
        "seed": 0,
    }
    code, out = run(tmp_path, "tower-bound", cfg)
    assert code == 0
    res = read_results(out)
    assert math.isclose(res["lower_bound"]["bound"], 0.98, abs_tol=1e-12)
    assert res["lower_bound"]["satisfied"]
    assert res["tails"]["ok"]
    assert abs(res["theta_star"] - 0.99) < 1e-9


def test_exit_code_config_errors(tmp_path, capsys):
    # malformed JSON
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    out = tmp_path / "out"
    out.mkdir()
    code = cli.main(["simulate", "--config", str(bad), "--out", str(out)])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"].startswith("config.")

    # structurally valid JSON with a geometry violation
    cfg = write_cfg(tmp_path, "overlap.json", {
        "table": {"scatterers": [
            {"center": [0.0, 0.0], "radius": 0.3},
            {"center": [0.1, 0.0], "radius": 0.3},
        ]},
        "seed": 0,
    })
    code = cli.main(["validate-geometry", "--config", cfg, "--out", str(out)])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"].startswith("geometry.")

    # missing required field
    cfg = write_cfg(tmp_path, "missing.json", {"seed": 0})
    code = cli.main(["escape-rate", "--config", cfg, "--out", str(out)])
    assert code == 2


def test_exit_code_numeric_error(tmp_path, capsys):
    cfg = dict(ESCAPE_CFG, n_particles=300, window=[10, 28])
    code, _ = run(tmp_path, "escape-rate", cfg)
    assert code == 3
    err = json.loads(capsys.readouterr().err)
    assert err["error"].startswith("escape.")


def test_exit_code_io_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "io.json", {"seed": 0})
    code = cli.main(["validate-geometry", "--config", cfg,
                     "--out", str(tmp_path / "does-not-exist")])
    assert code == 4
    err = json.loads(capsys.readouterr().err)
    assert err["error"].startswith("io.")
    # unreadable config is an io failure too
    code = cli.main(["validate-geometry", "--config",
                     str(tmp_path / "ghost.json"), "--out", str(tmp_path)])
    assert code == 4


def test_config_hash_ignores_threads():
    cfg = {"seed": 1, "n_particles": 100}
    assert cli.config_hash(cfg) == cli.config_hash(dict(cfg, threads=8))
    assert cli.config_hash(cfg) != cli.config_hash(dict(cfg, seed=2))


def test_config_rejects_non_canonical(tmp_path):
    nan_cfg = tmp_path / "nan.json"
    nan_cfg.write_text('{"x": NaN}')
    with pytest.raises(ConfigError):
        cli.load_config(str(nan_cfg))
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        cli.load_config(str(arr))


def test_run_experiment_validates_inputs():
    with pytest.raises(ConfigError):
        cli.run_experiment("does-not-exist", {})
    with pytest.raises(ConfigError):
        cli.run_experiment("validate-geometry", {"seed": -4})
    with pytest.raises(ConfigError):
        cli.run_experiment("validate-geometry", {"seed": 0, "threads": 0})
