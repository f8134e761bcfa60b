import json
import math
import os

import numpy as np
import pytest

import pgae
from pgae.cli import RunConfig, main
from pgae.errors import ConfigError
from pgae.estimator import write_trace
from pgae.harness import PolicySpec, run_policy
from pgae.nuisance import NuisanceConfig


def base_config(**overrides):
    cfg = {
        "world": {"kind": "synthetic"},
        "space": {"kind": "grid", "lo": -1.0, "hi": 1.0, "m": 10},
        "policies": [
            {"name": "naive", "gamma": 0.5, "treated_target": 60},
        ],
        "n_reps": 2,
        "seed": 7,
        "output_dir": "out",
    }
    cfg.update(overrides)
    return cfg


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)


def test_config_roundtrip_normalized():
    cfg = RunConfig.parse(base_config())
    again = RunConfig.parse(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown keys"):
        RunConfig.parse(base_config(bogus=1))
    bad = base_config()
    bad["world"]["mystery"] = True
    with pytest.raises(ConfigError, match="world"):
        RunConfig.parse(bad)
    bad = base_config()
    bad["policies"][0]["extra"] = 1
    with pytest.raises(ConfigError, match="policy 0"):
        RunConfig.parse(bad)


def test_config_env_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("PGAE_SEED", "99")
    monkeypatch.setenv("PGAE_OUTPUT_DIR", str(tmp_path / "envout"))
    cfg = RunConfig.parse(base_config())
    assert cfg.seed == 99
    assert cfg.output_dir.endswith("envout")


def test_cmd_design_constant_components(tmp_path):
    cfg = base_config()
    cfg["design"] = {"gamma": 0.5,
                     "components": {"alpha": [2.0] * 10, "beta": [1.0] * 10}}
    path = write_config(tmp_path, cfg)
    out = tmp_path / "design_out"
    code = main(["design", "--config", path, "--out", str(out)])
    assert code == 0
    bound = json.loads((out / "bound.json").read_text())
    # constant components: ratio is (beta/gamma + alpha) / (alpha + beta)
    assert bound["efficiency_ratio"] == pytest.approx((1 / 0.5 + 2) / 3, rel=1e-9)
    rows = (out / "design.csv").read_text().splitlines()
    assert rows[0] == "point,q,p,pi"
    assert len(rows) == 11


def test_cmd_design_benchmark_profile(tmp_path):
    cfg = base_config()
    cfg["space"] = {"kind": "grid", "lo": -1.0, "hi": 1.0, "m": 50}
    cfg["design"] = {"gamma": 0.3, "n_mc": 20000, "seed": 91}
    path = write_config(tmp_path, cfg)
    out = tmp_path / "d2"
    assert main(["design", "--config", path, "--out", str(out)]) == 0
    rows = (out / "design.csv").read_text().splitlines()[1:]
    pts = np.array([float(r.split(",")[0]) for r in rows])
    p = np.array([float(r.split(",")[2]) for r in rows])
    ref = (2 + pts) / np.sum(2 + pts)
    assert np.max(np.abs(p / ref - 1)) < 0.05


def test_cmd_design_malformed_config_no_partial_files(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json", encoding="utf-8")
    out = tmp_path / "never"
    code = main(["design", "--config", str(path), "--out", str(out)])
    assert code == 2
    assert not out.exists()


def test_cmd_simulate_smoke_and_reproducible(tmp_path):
    path = write_config(tmp_path, base_config())
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", path, "--out", str(out1), "--jobs", "1"]) == 0
    assert main(["simulate", "--config", path, "--out", str(out2), "--jobs", "2"]) == 0
    csv1 = (out1 / "metrics.csv").read_text().splitlines()
    csv2 = (out2 / "metrics.csv").read_text().splitlines()
    # identical apart from the runtime column (last)
    strip = lambda lines: ["," .join(row.split(",")[:-1]) for row in lines]
    assert strip(csv1) == strip(csv2)
    table = json.loads((out1 / "metrics.json").read_text())
    assert table["rows"][0]["policy"] == "naive"


def test_cmd_simulate_dump_reps(tmp_path):
    cfg = base_config(dump_reps=True)
    path = write_config(tmp_path, cfg)
    out = tmp_path / "dump"
    assert main(["simulate", "--config", path, "--out", str(out)]) == 0
    lines = (out / "reps.csv").read_text().splitlines()
    assert lines[0].startswith("policy,gamma,rep")
    assert len(lines) == 1 + 2  # n_reps rows


def test_cmd_estimate_constant_outcome(tmp_path):
    space = pgae.make_grid_space(-1, 1, 10)
    n = 120
    rng = pgae.stream(3)
    cells = rng.integers(0, 10, n)
    trace = pgae.Trace(
        x=space.points[cells], f=np.zeros(n), delta=np.ones(n), y=np.full(n, 3.25),
        p_snap=np.full(n, 0.1), pi_snap=np.ones(n), q_at_x=np.full(n, 0.1))
    tpath = tmp_path / "trace.csv"
    write_trace(trace, tpath)
    path = write_config(tmp_path, base_config())
    out = tmp_path / "est"
    code = main(["estimate", "--config", path, "--trace", str(tpath),
                 "--method", "naive", "--out", str(out)])
    assert code == 0
    report = json.loads((out / "estimate.json").read_text())
    assert report["theta_hat"] == pytest.approx(3.25)
    assert report["method"] == "naive"


def test_cmd_estimate_matches_in_run_report(tmp_path):
    dgp = pgae.SyntheticDgp()
    space = pgae.make_grid_space(-1, 1, 10)
    spec = PolicySpec("pgae", 0.5, 400, batch_size=100, regressor="least_squares",
                      predictor_mode="refit_linear")
    cfg_nuis = NuisanceConfig(regressor="least_squares")
    trace, report = run_policy(spec, dgp, space, seed=4, nuisance_cfg=cfg_nuis)
    tpath = tmp_path / "trace.csv"
    write_trace(trace, tpath)
    config = base_config()
    cfg_est = {"regressor": "least_squares", "batch_size": 100}
    config["estimator"] = cfg_est
    path = write_config(tmp_path, config)
    out = tmp_path / "est2"
    code = main(["estimate", "--config", path, "--trace", str(tpath),
                 "--method", "adaptive", "--out", str(out)])
    assert code == 0
    offline = json.loads((out / "estimate.json").read_text())
    assert offline["theta_hat"] == report.theta_hat
    assert offline["v_hat"] == report.v_hat
    assert offline["ci_lo"] == report.ci[0]


def test_cmd_estimate_adaptive_method_on_fixed_trace_allowed(tmp_path):
    space = pgae.make_grid_space(-1, 1, 5)
    rng = pgae.stream(8)
    n = 400
    cells = rng.integers(0, 5, n)
    f = rng.uniform(-1, 1, n)
    y = f + 0.1 * rng.standard_normal(n)
    trace = pgae.Trace(x=space.points[cells], f=f, delta=np.ones(n), y=y,
                       p_snap=np.full(n, 0.2), pi_snap=np.ones(n),
                       q_at_x=np.full(n, 0.2))
    tpath = tmp_path / "fixed.csv"
    write_trace(trace, tpath)
    config = base_config()
    config["space"] = {"kind": "grid", "lo": -1.0, "hi": 1.0, "m": 5}
    path = write_config(tmp_path, config)
    out = tmp_path / "est3"
    assert main(["estimate", "--config", path, "--trace", str(tpath),
                 "--method", "adaptive", "--out", str(out)]) == 0


def test_cmd_estimate_bad_trace_exit_code(tmp_path):
    tpath = tmp_path / "bad_trace.csv"
    tpath.write_text("nope\n", encoding="utf-8")
    path = write_config(tmp_path, base_config())
    code = main(["estimate", "--config", path, "--trace", str(tpath),
                 "--method", "naive", "--out", str(tmp_path / "x")])
    assert code == 3


def test_population_world_config(tmp_path):
    from pgae.datasets import bundled_census_path

    cfg = base_config()
    cfg["world"] = {"kind": "population", "path": bundled_census_path()}
    cfg["space"] = {"kind": "strata"}
    cfg["policies"] = [{"name": "naive", "gamma": 0.5, "treated_target": 50}]
    cfg["n_reps"] = 2
    path = write_config(tmp_path, cfg)
    out = tmp_path / "popout"
    assert main(["simulate", "--config", path, "--out", str(out)]) == 0
    text = (out / "metrics.csv").read_text()
    assert "naive" in text
