import math

import numpy as np
import pytest

import pgae
from pgae.errors import DataError, PredictorNotFittedError
from pgae.population import (
    BinnedMeanPredictor,
    KnnPredictor,
    LeastSquaresPredictor,
    OraclePredictor,
    PopulationSchema,
    save_population,
)
from pgae.rng import stream


def test_make_grid_space_two_cells():
    sp = pgae.make_grid_space(-1, 1, 2)
    assert np.allclose(sp.points, [-0.5, 0.5])
    assert np.allclose(sp.q_weights, [0.5, 0.5])


def test_make_grid_space_four_cells():
    sp = pgae.make_grid_space(-1, 1, 4)
    assert np.allclose(sp.points, [-0.75, -0.25, 0.25, 0.75])
    assert np.allclose(sp.q_weights, 0.25)


def test_make_grid_space_offset_range():
    sp = pgae.make_grid_space(0, 10, 5)
    assert np.allclose(sp.points, [1, 3, 5, 7, 9])
    assert np.allclose(sp.q_weights, 0.2)


@pytest.mark.parametrize("args", [(1, -1, 4), (-1, 1, 1), (math.nan, 1, 4), (0, math.inf, 3)])
def test_make_grid_space_rejects_bad_input(args):
    with pytest.raises(ValueError):
        pgae.make_grid_space(*args)


def test_space_invariants_enforced():
    with pytest.raises(ValueError):
        pgae.CovariateSpace(np.array([0.0, 1.0]), np.array([0.6, 0.6]))
    with pytest.raises(ValueError):
        pgae.CovariateSpace(np.array([0.0, 0.0]), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        pgae.CovariateSpace(np.array([0.0, 1.0]), np.array([1.2, -0.2]))


def test_grid_locate_roundtrip():
    sp = pgae.make_grid_space(-1, 1, 50)
    rng = stream(3)
    x = rng.uniform(-1, 1, 1000)
    idx = sp.locate(x)
    assert np.all(np.abs(sp.points[idx] - x) <= sp.cell_width / 2 + 1e-12)


def test_dgp_sample_no_noise_at_zero():
    dgp = pgae.SyntheticDgp()
    w, y = pgae.dgp_sample(dgp, 0.0, stream(0))
    assert y == pytest.approx(2 * w)


def test_dgp_noise_variance_at_one_third():
    dgp = pgae.SyntheticDgp()
    assert dgp.noise_sd(1 / 3) ** 2 == pytest.approx(4.0, abs=1e-12)


def test_dgp_population_mean_is_zero():
    dgp = pgae.SyntheticDgp()
    rng = stream(42)
    x = rng.uniform(-1, 1, 1_000_000)
    _, y = dgp.sample_many(x, rng)
    se = y.std() / math.sqrt(y.size)
    assert abs(y.mean()) <= 3 * se


def test_oracle_predictor_values():
    pred = OraclePredictor()
    assert pgae.dgp_predict(pred, 0.5, -0.5) == pytest.approx(-0.5)
    assert pgae.dgp_predict(pred, 0.0, 0.0) == pytest.approx(0.0)


def test_oracle_predictor_exactly_linear_in_w():
    pred = OraclePredictor()
    rng = stream(1)
    x = rng.uniform(-1, 1, 200)
    w1 = rng.uniform(-1, 1, 200)
    w2 = rng.uniform(-1, 1, 200)
    diff = pred.predict(x, w1) - pred.predict(x, w2)
    assert np.allclose(diff, 2 * (w1 - w2), atol=1e-12)


def test_refit_predictor_recovers_noise_free_coefficients():
    # Closed-form check: with y exactly 2w + x, least squares on [1, w, x]
    # returns (0, 2, 1) up to numerical error.
    rng = stream(7)
    x = rng.uniform(-1, 1, 100_000)
    w = rng.uniform(-1, 1, 100_000)
    y = 2 * w + x
    pred = LeastSquaresPredictor().fit(x, w, y)
    assert pred.coef[1] == pytest.approx(2.0, abs=1e-6)
    assert pred.coef[2] == pytest.approx(1.0, abs=1e-6)
    assert pred.coef[0] == pytest.approx(0.0, abs=1e-6)


def test_unfitted_predictor_raises():
    with pytest.raises(PredictorNotFittedError, match="not fitted"):
        pgae.dgp_predict(LeastSquaresPredictor(), 0.1, 0.2)


def test_knn_and_binned_predictors_fit_predict():
    rng = stream(9)
    x = rng.uniform(-1, 1, 3000)
    w = rng.uniform(-1, 1, 3000)
    y = 2 * w + x
    for pred in (KnnPredictor(k=25), BinnedMeanPredictor(n_bins=10)):
        pred.fit(x, w, y)
        out = pred.predict(x[:100], w[:100])
        assert np.all(np.isfinite(out))
        assert np.corrcoef(out, y[:100])[0, 1] > 0.8


# ---------------------------------------------------------------------------
# Finite populations
# ---------------------------------------------------------------------------

SCHEMA = PopulationSchema(covariates=("g",), features=("z",), outcome="y")


def _write(tmp_path, text, name="pop.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_population_small(tmp_path):
    path = _write(
        tmp_path,
        "g,z,y\nA,0.0,1.0\nA,0.5,2.0\nA,1.0,3.0\nB,0.0,4.0\nB,0.5,5.0\nB,1.0,6.0\n",
    )
    pop = pgae.load_population(path, SCHEMA)
    assert pop.n_units == 6
    assert np.allclose(pop.q_weights, [0.5, 0.5])
    assert pop.true_mean() == pytest.approx(3.5)


def test_load_population_missing_outcome_names_row(tmp_path):
    path = _write(tmp_path, "g,z,y\nA,0.0,1.0\nA,0.5,\nB,1.0,3.0\n")
    with pytest.raises(DataError, match="row 3"):
        pgae.load_population(path, SCHEMA)


def test_load_population_non_numeric_outcome(tmp_path):
    path = _write(tmp_path, "g,z,y\nA,0.0,oops\n")
    with pytest.raises(DataError, match="row 2"):
        pgae.load_population(path, SCHEMA)


def test_load_population_missing_column(tmp_path):
    path = _write(tmp_path, "g,z\nA,0.0\n")
    with pytest.raises(DataError, match="missing columns: y"):
        pgae.load_population(path, SCHEMA)


def test_population_roundtrip_bit_exact(tmp_path):
    text = "g,z,y\nA,0.0,1.0\nA,0.5,2.0\nB,1.0,3.5\nB,0.25,4.25\n"
    path = _write(tmp_path, text)
    pop = pgae.load_population(path, SCHEMA)
    out = tmp_path / "roundtrip.csv"
    save_population(pop, out)
    assert out.read_text(encoding="utf-8").replace("\r\n", "\n") == text
    again = pgae.load_population(out, SCHEMA)
    save_population(again, out)
    assert out.read_text(encoding="utf-8").replace("\r\n", "\n") == text


def test_bootstrap_single_unit_stratum(tmp_path):
    path = _write(tmp_path, "g,z,y\nA,0.0,1.0\nB,1.0,7.0\nB,2.0,9.0\n")
    pop = pgae.load_population(path, SCHEMA)
    for _ in range(5):
        _, y = pgae.bootstrap_draw(pop, "A", stream(0))
        assert y == 1.0


def test_bootstrap_two_unit_frequencies(tmp_path):
    path = _write(tmp_path, "g,z,y\nB,1.0,7.0\nB,2.0,9.0\n")
    pop = pgae.load_population(path, SCHEMA)
    rng = stream(11)
    n = 100_000
    draws = np.array([pgae.bootstrap_draw(pop, "B", rng)[1] for _ in range(n)])
    freq = np.mean(draws == 7.0)
    se = math.sqrt(0.25 / n)
    assert abs(freq - 0.5) <= 3 * se


def test_bootstrap_unknown_stratum(tmp_path):
    path = _write(tmp_path, "g,z,y\nA,0.0,1.0\n")
    pop = pgae.load_population(path, SCHEMA)
    with pytest.raises(DataError, match="unknown stratum"):
        pgae.bootstrap_draw(pop, "Z", stream(0))


def test_bootstrap_stratum_mean_converges(tmp_path):
    path = _write(tmp_path, "g,z,y\nA,0,1.0\nA,0,2.0\nA,0,6.0\n".replace("0,", "0.0,"))
    pop = pgae.load_population(path, SCHEMA)
    rng = stream(5)
    draws = pop.draw_units(np.zeros(50_000, dtype=np.int64), rng)
    mean = pop.outcomes[draws].mean()
    assert mean == pytest.approx(3.0, abs=0.05)


def test_bundled_census_loads():
    from pgae.datasets import load_bundled_census

    pop = load_bundled_census()
    assert pop.n_units == 22_104
    assert pop.q_weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert pop.n_strata == 12
