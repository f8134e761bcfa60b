import numpy as np
import pytest

import pgae
from pgae.datasets import load_bundled_census
from pgae.errors import StarvationError
from pgae.harness import (
    ORACLE_SEED,
    PolicySpec,
    _run_fixed_design,
    oracle_components_numeric,
    oracle_design_numeric,
    population_components,
    replicate,
    run_policy,
    simulate_fixed_design,
)
from pgae.nuisance import NuisanceConfig
from pgae.population import ConstantPredictor, OraclePredictor
from pgae.rng import stream

DGP = pgae.SyntheticDgp()
SPACE = pgae.make_grid_space(-1, 1, 50)
LS = NuisanceConfig(regressor="least_squares")


def test_policy_spec_validation():
    with pytest.raises(ValueError):
        PolicySpec("bogus", 0.5, 100)
    with pytest.raises(ValueError):
        PolicySpec("pgae", 1.5, 100)
    with pytest.raises(ValueError):
        PolicySpec("pgae", 0.5, 0)


def test_naive_policy_trace_shape():
    spec = PolicySpec("naive", 0.5, 250)
    trace, report = run_policy(spec, DGP, SPACE, seed=0)
    assert len(trace) == 250
    assert trace.n_treated == 250
    assert np.all(trace.delta == 1)
    assert np.all(trace.p_snap == trace.q_at_x)
    assert report.method == "naive"


def test_pgae_oracle_full_budget_means_full_experimentation():
    spec = PolicySpec("pgae_oracle", 1.0, 300, batch_size=100, regressor="least_squares")
    trace, report = run_policy(spec, DGP, SPACE, seed=1, nuisance_cfg=LS)
    assert trace.n_treated == 300
    assert len(trace) == 300  # pi = 1 everywhere, even during warm-up
    assert np.all(trace.pi_snap == 1.0)


def test_pgae_sample_to_treated_ratio_near_inverse_budget():
    spec = PolicySpec("pgae", 0.4, 3000, batch_size=100, regressor="least_squares",
                      predictor_mode="refit_linear")
    ratios = []
    for s in range(20):
        trace, _ = run_policy(spec, DGP, SPACE, seed=(31, s), nuisance_cfg=LS)
        assert trace.n_treated == 3000
        ratios.append(len(trace) / trace.n_treated)
    assert 2.3 <= float(np.mean(ratios)) <= 2.7


def test_oracle_design_recovery_and_alpha():
    design = oracle_design_numeric(DGP, SPACE, 0.3, n_mc=100_000, seed=ORACLE_SEED)
    p_ref = SPACE.q_weights * (2 + SPACE.points)
    p_ref /= p_ref.sum()
    assert np.max(np.abs(design.p / p_ref - 1)) < 0.02
    vc = oracle_components_numeric(DGP, SPACE, n_mc=100_000, seed=ORACLE_SEED)
    alpha_true = (2 + SPACE.points) ** 2 / 3
    assert np.max(np.abs(vc.alpha / alpha_true - 1)) < 0.03


def test_oracle_design_noise_free_outcome_flat_pi():
    dgp = pgae.SyntheticDgp(noise_scale=0.0)
    design = oracle_design_numeric(dgp, SPACE, 0.35, n_mc=20_000, seed=3)
    assert np.allclose(design.pi, 0.35, atol=0.01)


def test_oracle_design_worthless_predictor_keeps_q():
    design = oracle_design_numeric(DGP, SPACE, 0.5, n_mc=20_000, seed=4,
                                   predictor=ConstantPredictor(0.0))
    assert "alpha_all_zero_fallback" in design.notes
    assert np.allclose(design.p, SPACE.q_weights)


def test_simulate_fixed_design_total_exact():
    design = oracle_design_numeric(DGP, SPACE, 0.4, n_mc=20_000, seed=5)
    trace = simulate_fixed_design(DGP, SPACE, design, total=1234, seed=6)
    assert len(trace) == 1234


def test_fixed_design_matched_treated_exact():
    design = oracle_design_numeric(DGP, SPACE, 0.4, n_mc=20_000, seed=5)
    trace = _run_fixed_design(DGP, SPACE, design, stream(7), OraclePredictor(),
                              treated_target=500, cap=100_000)
    assert trace.n_treated == 500
    assert trace.delta[-1] == 1  # stops exactly on the target record


def test_starvation_guard():
    design = pgae.DesignRule(SPACE.q_weights.copy(),
                             np.full(SPACE.size, 0.01), 0.01)
    with pytest.raises(StarvationError):
        _run_fixed_design(DGP, SPACE, design, stream(8), OraclePredictor(),
                          treated_target=1000, cap=2000)


def test_population_components_anova_identity():
    pop = load_bundled_census()
    vc = population_components(pop, pgae.harness.fixed_population_predictor(pop))
    for s in range(pop.n_strata):
        units = pop.stratum_units(s)
        total = float(pop.outcomes[units].var())
        assert vc.alpha[s] + vc.beta[s] == pytest.approx(total, rel=1e-9)
        assert vc.alpha[s] >= 0 and vc.beta[s] >= 0


def test_replicate_constant_world_perfect_coverage(tmp_path):
    rows = ["g,z,y"] + [f"A,{i}.0,5.0" for i in range(30)]
    path = tmp_path / "const.csv"
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    pop = pgae.load_population(
        path, pgae.PopulationSchema(("g",), ("z",), "y"))
    spec = PolicySpec("naive", 0.5, 40)
    table = replicate([spec], pop, pop.space(), n_reps=8, seed=3)
    row = table.row("naive", 0.5)
    assert row["mse"] == 0.0
    assert row["coverage"] == 1.0
    assert row["failures"] == 0


def test_replicate_deterministic_across_worker_counts():
    specs = [PolicySpec("naive", 0.5, 60), PolicySpec("ppi_oracle", 0.5, 30)]
    space = pgae.make_grid_space(-1, 1, 10)
    t1 = replicate(specs, DGP, space, n_reps=6, seed=11, jobs=1)
    t2 = replicate(specs, DGP, space, n_reps=6, seed=11, jobs=2)
    for r1, r2 in zip(t1.rows, t2.rows):
        for key in r1:
            if key == "mean_runtime":
                continue
            assert r1[key] == r2[key], key


def test_replicate_bias_near_zero_on_population_replay():
    pop = load_bundled_census()
    space = pop.space()
    specs = [PolicySpec("naive", 0.5, 200)]
    table = replicate(specs, pop, space, n_reps=40, seed=21)
    row = table.row("naive", 0.5)
    se = np.sqrt(row["var"] / row["n_replications"])
    assert abs(row["bias"]) <= 3 * se
    assert row["mse"] >= row["bias"] ** 2


def test_metrics_table_serialization(tmp_path):
    spec = PolicySpec("naive", 0.5, 50)
    table = replicate([spec], DGP, pgae.make_grid_space(-1, 1, 5),
                      n_reps=3, seed=2)
    table.to_csv(tmp_path / "m.csv")
    table.to_json(tmp_path / "m.json")
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header.startswith("policy,gamma,n_replications,failures,mse,bias")
    assert (tmp_path / "m.json").read_text().startswith("{")


def test_ppi_adaptive_runs_on_population():
    pop = load_bundled_census()
    space = pop.space()
    spec = PolicySpec("ppi_adaptive", 0.25, 120, batch_size=64)
    trace, report = run_policy(spec, pop, space, seed=5)
    assert trace.n_treated == 120
    assert report.method == "ppi"
    assert np.all(trace.pi_snap == 0.25)


def test_pgae_runs_on_population():
    pop = load_bundled_census()
    space = pop.space()
    spec = PolicySpec("pgae", 0.25, 150, batch_size=64, regressor="binned_mean")
    trace, report = run_policy(spec, pop, space, seed=6)
    assert trace.n_treated == 150
    assert report.method == "adaptive"
    assert np.isfinite(report.theta_hat)
    # warm-up experiments everything, later batches must not
    assert np.all(trace.pi_snap[: 32] == 1.0)
    assert np.any(trace.pi_snap < 1.0)
