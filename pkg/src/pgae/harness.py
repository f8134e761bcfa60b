"""Policy orchestration: run data-collection policies, replicate, aggregate.

Policies are compared on a matched treated budget: each run draws samples
until the number of actually-experimented units hits ``treated_target``, so
a policy with experimentation share gamma consumes roughly
``treated_target / gamma`` total samples.  Prediction-free policies sample
exactly ``treated_target`` units with full experimentation.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import design as design_mod
from .design import DesignRule, VarianceComponents
from .errors import StarvationError
from .estimator import Trace, adaptive_estimate, baseline_estimates
from .nuisance import NuisanceConfig, fit_nuisances, update_design
from .population import (
    GRID,
    ConstantPredictor,
    CovariateSpace,
    FinitePopulation,
    LeastSquaresPredictor,
    OraclePredictor,
    Predictor,
    SyntheticDgp,
)
from .rng import child_sequence, stream

POLICY_NAMES = (
    "pgae", "pgae_oracle", "naive", "opt_sample",
    "ppi_oracle", "ppi_adaptive", "pgae_no_pred",
)

ORACLE_N_MC = 100_000
ORACLE_SEED = 91

_MIN_PREDICTOR_FIT = 25
# Early component estimates are noisy; designs built from them are shrunk
# toward the flat design with weight n / (n + _DESIGN_SHRINK_N0) so the
# sampler only commits to sharp allocations once the estimates have settled.
_DESIGN_SHRINK_N0 = 150.0


@dataclass(frozen=True)
class PolicySpec:
    """One policy configuration for a replication study."""

    name: str
    gamma: float
    treated_target: int
    batch_size: int = 1000
    regressor: str = "binned_mean"
    predictor_mode: str = "auto"

    def __post_init__(self):
        if self.name not in POLICY_NAMES:
            raise ValueError(f"unknown policy {self.name!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.treated_target < 1 or self.batch_size < 1:
            raise ValueError("treated_target and batch_size must be positive")
        if self.predictor_mode not in ("auto", "oracle_linear", "fixed_oracle",
                                       "refit_linear", "refit"):
            raise ValueError(f"unknown predictor_mode {self.predictor_mode!r}")


# ---------------------------------------------------------------------------
# Oracle variance components
# ---------------------------------------------------------------------------

_component_cache: dict = {}


def _space_token(space: CovariateSpace) -> str:
    h = hashlib.sha1()
    h.update(space.points.tobytes())
    h.update(space.q_weights.tobytes())
    return h.hexdigest()


def oracle_components_numeric(
    dgp: SyntheticDgp, space: CovariateSpace, n_mc: int = ORACLE_N_MC,
    seed: int = ORACLE_SEED, predictor: Predictor | None = None,
) -> VarianceComponents:
    """Monte Carlo estimate of (alpha, beta) per cell from the true model.

    Conditioning on each cell midpoint, the conditional mean surface of the
    generator is evaluated on a large prediction sample and decomposed into
    between- and within-prediction-bin variance.
    """
    predictor = predictor or OraclePredictor()
    key = ("dgp", dgp.noise_scale, dgp.noise_frequency, _space_token(space),
           n_mc, seed, predictor.cache_token())
    if key in _component_cache:
        return _component_cache[key]
    if n_mc < 1000:
        raise ValueError("n_mc too small for a stable oracle")
    m = space.size
    alpha = np.empty(m)
    beta = np.empty(m)
    n_bins = max(1, min(100, n_mc // 100))
    probs = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    for i in range(m):
        xi = float(space.points[i])
        rng = stream(seed, i)
        w = rng.uniform(-1.0, 1.0, size=n_mc)
        f = np.asarray(predictor.predict(np.full(n_mc, xi), w), dtype=float)
        mean_y = np.asarray(dgp.outcome_mean(xi, w), dtype=float)
        noise_var = float(dgp.noise_sd(xi)) ** 2
        edges = np.unique(np.quantile(f, probs)) if probs.size else np.empty(0)
        bins = np.searchsorted(edges, f, side="right")
        counts = np.bincount(bins, minlength=edges.size + 1)
        sums = np.bincount(bins, weights=mean_y, minlength=edges.size + 1)
        shares = counts / n_mc
        bin_means = sums / np.maximum(counts, 1)
        grand = float(mean_y.mean())
        second = float(np.mean(mean_y ** 2))
        between = float(shares @ bin_means ** 2) - grand ** 2
        within = second - float(shares @ bin_means ** 2)
        alpha[i] = max(between, 0.0)
        beta[i] = noise_var + max(within, 0.0)
    vc = VarianceComponents(alpha, beta)
    _component_cache[key] = vc
    return vc


def population_components(pop: FinitePopulation, predictor: Predictor) -> VarianceComponents:
    """Exact-within-binning (alpha, beta) per stratum of a finite population."""
    key = ("pop", id(pop), predictor.cache_token())
    if key in _component_cache:
        return _component_cache[key]
    f_all = np.asarray(
        predictor.predict(pop.stratum_of_unit.astype(float), pop.features), dtype=float
    )
    alpha = np.empty(pop.n_strata)
    beta = np.empty(pop.n_strata)
    for s in range(pop.n_strata):
        units = pop.stratum_units(s)
        y = pop.outcomes[units]
        f = f_all[units]
        n_bins = int(np.clip(units.size // 40, 1, 20))
        probs = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
        edges = np.unique(np.quantile(f, probs)) if probs.size else np.empty(0)
        bins = np.searchsorted(edges, f, side="right")
        counts = np.bincount(bins, minlength=edges.size + 1)
        sums = np.bincount(bins, weights=y, minlength=edges.size + 1)
        shares = counts / units.size
        bin_means = sums / np.maximum(counts, 1)
        between = float(shares @ bin_means ** 2) - float(y.mean()) ** 2
        alpha[s] = max(between, 0.0)
        beta[s] = max(float(y.var()) - alpha[s], 0.0)
    vc = VarianceComponents(alpha, beta)
    _component_cache[key] = vc
    return vc


def oracle_design_numeric(
    world, space: CovariateSpace, gamma: float, n_mc: int = ORACLE_N_MC,
    seed: int = ORACLE_SEED, predictor: Predictor | None = None,
) -> DesignRule:
    """Variance-optimal design computed from oracle components (cached)."""
    vc = oracle_world_components(world, space, n_mc=n_mc, seed=seed, predictor=predictor)
    return design_mod.optimal_design(space, vc, gamma)


def oracle_world_components(world, space, n_mc=ORACLE_N_MC, seed=ORACLE_SEED,
                            predictor: Predictor | None = None) -> VarianceComponents:
    if isinstance(world, SyntheticDgp):
        return oracle_components_numeric(world, space, n_mc=n_mc, seed=seed,
                                         predictor=predictor)
    return population_components(world, predictor or fixed_population_predictor(world))


_pop_predictor_cache: dict = {}


def fixed_population_predictor(pop: FinitePopulation) -> Predictor:
    """Least-squares predictor fit once on the whole population (stand-in for
    a model pretrained on prior data)."""
    key = id(pop)
    if key not in _pop_predictor_cache:
        pred = LeastSquaresPredictor(x_mode="onehot", n_strata=pop.n_strata)
        pred.fit(pop.stratum_of_unit.astype(float), pop.features, pop.outcomes)
        _pop_predictor_cache[key] = pred
    return _pop_predictor_cache[key]


# ---------------------------------------------------------------------------
# Sampling loops
# ---------------------------------------------------------------------------


def _draw_block(world, space, p, pi, n, rng, predictor):
    """Draw n records under (p, pi); returns columns plus side information."""
    cells = rng.choice(space.size, size=n, p=p)
    if isinstance(world, SyntheticDgp):
        x = space.points[cells] + (rng.random(n) - 0.5) * (space.cell_width or 0.0)
        w = world.sample_w(rng, n)
        y_full = world.outcome_mean(x, w) + world.noise_sd(x) * rng.standard_normal(n)
        f = np.asarray(predictor.predict(x, w), dtype=float)
    else:
        x = cells.astype(float)
        units = world.draw_units(cells, rng)
        w = world.features[units]
        y_full = world.outcomes[units].astype(float)
        f = np.asarray(predictor.predict(x, w), dtype=float)
    delta = rng.random(n) < pi[cells]
    return cells, x, w, f, y_full, delta


class _TraceBuilder:
    def __init__(self, space):
        self.space = space
        self.cols = {k: [] for k in ("x", "f", "delta", "y", "p", "pi", "q", "w")}

    def add(self, x, f, delta, y_full, p_at, pi_at, q_at, w):
        y = np.where(delta, y_full, np.nan)
        for key, val in zip(("x", "f", "delta", "y", "p", "pi", "q", "w"),
                            (x, f, delta.astype(np.int8), y, p_at, pi_at, q_at, w)):
            self.cols[key].append(val)

    def concat(self, key):
        return np.concatenate(self.cols[key]) if self.cols[key] else np.empty(0)

    def trace(self) -> Trace:
        return Trace(
            x=self.concat("x"), f=self.concat("f"), delta=self.concat("delta"),
            y=self.concat("y"), p_snap=self.concat("p"), pi_snap=self.concat("pi"),
            q_at_x=self.concat("q"),
        )


def _truncate_at_target(delta, needed):
    """Index one past the record where cumulative treated hits ``needed``."""
    cum = np.cumsum(delta)
    if cum[-1] < needed:
        return delta.size, int(cum[-1])
    pos = int(np.searchsorted(cum, needed))
    return pos + 1, needed


def _run_fixed_design(world, space, design, rng, predictor, *, total=None,
                      treated_target=None, cap=None) -> Trace:
    """Sample under a fixed design, by total count or to a treated target."""
    builder = _TraceBuilder(space)
    q = space.q_weights
    if total is not None:
        cells, x, w, f, y_full, delta = _draw_block(
            world, space, design.p, design.pi, total, rng, predictor)
        builder.add(x, f, delta, y_full, design.p[cells], design.pi[cells], q[cells], w)
        return builder.trace()
    rate = max(design_mod.budget_usage(design), 1e-9)
    drawn, treated = 0, 0
    while treated < treated_target:
        if cap is not None and drawn >= cap:
            raise StarvationError(
                f"treated target {treated_target} not reached within {cap} samples")
        remaining = treated_target - treated
        block = int(min(max(64, math.ceil(1.2 * remaining / rate) + 16),
                        (cap - drawn) if cap else 10 ** 9))
        cells, x, w, f, y_full, delta = _draw_block(
            world, space, design.p, design.pi, block, rng, predictor)
        keep, got = _truncate_at_target(delta, remaining)
        sl = slice(0, keep)
        builder.add(x[sl], f[sl], delta[sl], y_full[sl], design.p[cells[sl]],
                    design.pi[cells[sl]], q[cells[sl]], w[sl])
        treated += got
        drawn += keep
    return builder.trace()


def simulate_fixed_design(world, space, design, total, seed,
                          predictor: Predictor | None = None) -> Trace:
    """Public fixed-design sampler used for cross-fitting studies."""
    rng = stream(seed) if not isinstance(seed, np.random.Generator) else seed
    predictor = predictor or _default_fixed_predictor(world)
    return _run_fixed_design(world, space, design, rng, predictor, total=total)


def _default_fixed_predictor(world):
    if isinstance(world, SyntheticDgp):
        return OraclePredictor()
    return fixed_population_predictor(world)


def _make_refit_predictor(world, space):
    if isinstance(world, SyntheticDgp):
        return LeastSquaresPredictor(x_mode="linear")
    return LeastSquaresPredictor(x_mode="onehot", n_strata=space.size)


def _resolve_predictor_mode(spec, world):
    if spec.predictor_mode != "auto":
        return spec.predictor_mode
    if isinstance(world, SyntheticDgp):
        return world.predictor_mode
    return "refit"


def _smooth_grid(values: np.ndarray, half: int = 2) -> np.ndarray:
    kernel = np.ones(2 * half + 1)
    padded = np.concatenate([values[:half][::-1], values, values[-half:][::-1]])
    return np.convolve(padded, kernel / kernel.size, mode="valid")


def _design_components(vc: VarianceComponents, space: CovariateSpace,
                       n_labeled: int) -> VarianceComponents:
    """Stabilized components for design updates.

    Grid spaces get a short moving average (the underlying variance surfaces
    are smooth in x, the per-cell noise is not), and everything is shrunk
    toward the flat design while the labeled sample is small.  Estimation is
    unaffected; designs built from noisy components are simply less sharp.
    """
    a, b = vc.alpha, vc.beta
    if space.kind == GRID and space.size >= 5:
        a = _smooth_grid(a, half=2)
        b = _smooth_grid(b, half=1)
    lam = n_labeled / (n_labeled + _DESIGN_SHRINK_N0)
    q = space.q_weights
    a_bar = float(q @ a)
    b_bar = float(q @ b)
    return VarianceComponents(lam * a + (1 - lam) * a_bar,
                              lam * b + (1 - lam) * b_bar)


def _block_sizes(batch_size: int):
    """Sampling block lengths matching ``estimator.batch_spans``."""
    half = max(1, batch_size // 2)
    yield half
    yield half
    while True:
        yield batch_size


def _run_adaptive(spec, world, space, rng, cfg, *, fixed_design=None,
                  refit_predictor=True, warm_start=True, cap=None):
    """Batched adaptive sampling loop; returns (trace, prefix fits).

    Starts from the warm design (p = q, pi = 1) and, once enough labeled
    records exist, refits the conditional moments after every batch and
    updates the design by the normalize-then-cap rule.  With
    ``fixed_design`` supplied the design jumps there after the warm batches
    instead of tracking estimated components; ``warm_start=False`` applies
    the fixed design from the first record (for estimators that do not rely
    on fitted moments).  The fits are keyed by the record count they were
    trained on, ready for reuse by the one-step estimator.
    """
    q = space.q_weights
    warm = DesignRule(q.copy(), np.ones(space.size), 1.0, notes=("warm_up",))
    design = warm if warm_start else fixed_design
    predictor: Predictor
    if refit_predictor:
        predictor = ConstantPredictor(0.0)
    else:
        predictor = _default_fixed_predictor(world)
    # With a from-scratch predictor the first batch carries uninformative
    # predictions, so the outcome-on-prediction fit only stabilizes one batch
    # later; the design stays warm until then to keep weights bounded.
    design_warm_batches = 2 if refit_predictor else 1
    builder = _TraceBuilder(space)
    fits: dict = {}
    drawn, treated, batches = 0, 0, 0
    # First-span records are excluded from moment fits, mirroring
    # ``adaptive_estimate``; their predictions may predate any predictor fit.
    skip = max(1, spec.batch_size // 2)
    target = spec.treated_target
    blocks = _block_sizes(spec.batch_size)
    while treated < target:
        if cap is not None and drawn >= cap:
            raise StarvationError(
                f"treated target {target} not reached within {cap} samples")
        block = next(blocks)
        if cap is not None:
            block = min(block, cap - drawn)
        cells, x, w, f, y_full, delta = _draw_block(
            world, space, design.p, design.pi, block, rng, predictor)
        keep, got = _truncate_at_target(delta, target - treated)
        sl = slice(0, keep)
        builder.add(x[sl], f[sl], delta[sl], y_full[sl], design.p[cells[sl]],
                    design.pi[cells[sl]], q[cells[sl]], w[sl])
        treated += got
        drawn += keep
        batches += 1
        if treated >= target:
            break
        x_all = builder.concat("x")
        f_all = builder.concat("f")
        d_all = builder.concat("delta")
        y_all = builder.concat("y")
        labeled = d_all == 1
        n_fit_labeled = int(labeled[skip:].sum())
        if n_fit_labeled >= cfg.min_labeled and batches >= design_warm_batches:
            if fixed_design is not None:
                design = fixed_design
            else:
                fit = fit_nuisances(x_all[skip:], f_all[skip:], d_all[skip:],
                                    y_all[skip:], space, cfg)
                fits[drawn] = fit
                design = update_design(
                    space, _design_components(fit.components(), space, n_fit_labeled),
                    spec.gamma)
        if refit_predictor and int(labeled.sum()) >= _MIN_PREDICTOR_FIT:
            w_all = (np.concatenate(builder.cols["w"])
                     if isinstance(world, SyntheticDgp)
                     else np.vstack(builder.cols["w"]))
            predictor = _make_refit_predictor(world, space).fit(
                x_all[labeled], w_all[labeled], y_all[labeled])
    return builder.trace(), fits


def run_policy(spec: PolicySpec, world, space: CovariateSpace, seed,
               nuisance_cfg: NuisanceConfig | None = None, level: float = 0.95,
               oracle_n_mc: int = ORACLE_N_MC, oracle_seed: int = ORACLE_SEED):
    """Run one policy to its treated target; returns (trace, report)."""
    rng = stream(seed) if not isinstance(seed, np.random.Generator) else seed
    cfg = nuisance_cfg or NuisanceConfig(regressor=spec.regressor)
    if cfg.regressor != spec.regressor:
        cfg = replace(cfg, regressor=spec.regressor)
    q = space.q_weights
    cap = math.ceil(10 * spec.treated_target / spec.gamma)
    mode = _resolve_predictor_mode(spec, world)
    name = spec.name

    if name == "naive":
        design = DesignRule(q.copy(), np.ones(space.size), 1.0)
        trace = _run_fixed_design(world, space, design, rng, ConstantPredictor(0.0),
                                  total=spec.treated_target)
        return trace, baseline_estimates(trace, space, "naive", level)

    if name in ("opt_sample", "pgae_no_pred"):
        vc = oracle_world_components(world, space, n_mc=oracle_n_mc, seed=oracle_seed)
        if name == "opt_sample":
            p = q * np.sqrt(np.maximum(vc.alpha + vc.beta, design_mod.VAR_FLOOR))
            p = p / p.sum()
        else:
            p = design_mod.optimal_design(space, vc, spec.gamma).p
        design = DesignRule(p, np.ones(space.size), 1.0)
        trace = _run_fixed_design(world, space, design, rng, ConstantPredictor(0.0),
                                  total=spec.treated_target)
        return trace, baseline_estimates(trace, space, "ipw_only", level)

    if name == "ppi_oracle":
        vc = oracle_world_components(world, space, n_mc=oracle_n_mc, seed=oracle_seed)
        pi = design_mod.pi_for_fixed_p(space, q, vc.beta, spec.gamma)
        design = DesignRule(q.copy(), pi, spec.gamma)
        trace = _run_fixed_design(world, space, design, rng,
                                  _default_fixed_predictor(world),
                                  treated_target=spec.treated_target, cap=cap)
        return trace, baseline_estimates(trace, space, "ppi", level)

    if name == "ppi_adaptive":
        design = DesignRule(q.copy(), np.full(space.size, spec.gamma), spec.gamma)
        trace, _ = _run_adaptive(spec, world, space, rng, cfg, fixed_design=design,
                                 refit_predictor=True, warm_start=False, cap=cap)
        return trace, baseline_estimates(trace, space, "ppi", level)

    if name == "pgae_oracle":
        design = oracle_design_numeric(world, space, spec.gamma, n_mc=oracle_n_mc,
                                       seed=oracle_seed)
        trace, fits = _run_adaptive(spec, world, space, rng, cfg, fixed_design=design,
                                    refit_predictor=False, warm_start=True, cap=cap)
        return trace, adaptive_estimate(trace, space, cfg, spec.batch_size, level,
                                        fits=fits)

    # pgae: the fully adaptive loop.
    refit = mode in ("refit", "refit_linear")
    trace, fits = _run_adaptive(spec, world, space, rng, cfg, fixed_design=None,
                                refit_predictor=refit, cap=cap)
    return trace, adaptive_estimate(trace, space, cfg, spec.batch_size, level,
                                    fits=fits)


# ---------------------------------------------------------------------------
# Replication studies
# ---------------------------------------------------------------------------

METRIC_COLUMNS = (
    "policy", "gamma", "n_replications", "failures", "mse", "bias", "var",
    "coverage", "ci_width_mean", "mean_n_total", "mean_n_treated", "mean_runtime",
)


@dataclass
class MetricsTable:
    """Aggregated replication metrics, one row per (policy, gamma)."""

    rows: list
    per_rep: list | None = None

    def to_csv(self, path) -> None:
        _atomic_write(path, self._csv_text())

    def _csv_text(self) -> str:
        lines = [",".join(METRIC_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(repr(row[c]) if isinstance(row[c], float)
                                  else str(row[c]) for c in METRIC_COLUMNS))
        return "\n".join(lines) + "\n"

    def to_json(self, path) -> None:
        _atomic_write(path, json.dumps({"rows": self.rows}, indent=2, sort_keys=True) + "\n")

    def row(self, policy: str, gamma: float) -> dict:
        for row in self.rows:
            if row["policy"] == policy and row["gamma"] == gamma:
                return row
        raise KeyError((policy, gamma))


def _atomic_write(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


_POOL_STATE: dict = {}


def _pool_init(world, space, specs, seed, cfg, level, oracle_n_mc, oracle_seed):
    _POOL_STATE.update(world=world, space=space, specs=specs, seed=seed, cfg=cfg,
                       level=level, oracle_n_mc=oracle_n_mc, oracle_seed=oracle_seed)


def _pool_run(task):
    si, rep = task
    st = _POOL_STATE
    return _one_replication(st["specs"][si], st["world"], st["space"], st["seed"],
                            si, rep, st["cfg"], st["level"], st["oracle_n_mc"],
                            st["oracle_seed"])


def _one_replication(spec, world, space, seed, si, rep, cfg, level,
                     oracle_n_mc, oracle_seed):
    t0 = time.perf_counter()
    try:
        trace, report = run_policy(
            spec, world, space, child_sequence(seed, si, rep),
            nuisance_cfg=cfg, level=level,
            oracle_n_mc=oracle_n_mc, oracle_seed=oracle_seed,
        )
        return {
            "spec": si, "rep": rep, "error": None,
            "theta_hat": report.theta_hat, "ci_lo": report.ci[0],
            "ci_hi": report.ci[1], "n_total": report.n_total,
            "n_treated": report.n_treated, "runtime": time.perf_counter() - t0,
        }
    except StarvationError as exc:
        return {"spec": si, "rep": rep, "error": str(exc),
                "runtime": time.perf_counter() - t0}


def replicate(specs, world, space: CovariateSpace, n_reps: int, seed,
              jobs: int = 1, nuisance_cfg: NuisanceConfig | None = None,
              level: float = 0.95, keep_reps: bool = False,
              oracle_n_mc: int = ORACLE_N_MC, oracle_seed: int = ORACLE_SEED,
              true_theta: float | None = None) -> MetricsTable:
    """Run each policy spec ``n_reps`` times on independent streams.

    The aggregation is a pure function of the per-replication results in
    replication order, so the table's statistical columns are identical for
    any worker count (runtimes are wall-clock and excluded from that
    guarantee).
    """
    specs = list(specs)
    if n_reps < 1:
        raise ValueError("n_reps must be positive")
    theta_true = world.true_mean() if true_theta is None else float(true_theta)
    tasks = [(si, rep) for si in range(len(specs)) for rep in range(n_reps)]
    results = {}
    if jobs > 1:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=_pool_init,
            initargs=(world, space, specs, seed, nuisance_cfg, level,
                      oracle_n_mc, oracle_seed),
        ) as pool:
            for out in pool.map(_pool_run, tasks, chunksize=max(1, len(tasks) // (8 * jobs))):
                results[(out["spec"], out["rep"])] = out
    else:
        for si, rep in tasks:
            results[(si, rep)] = _one_replication(
                specs[si], world, space, seed, si, rep, nuisance_cfg, level,
                oracle_n_mc, oracle_seed)

    rows = []
    per_rep = [] if keep_reps else None
    for si, spec in enumerate(specs):
        reps = [results[(si, rep)] for rep in range(n_reps)]
        if keep_reps:
            for out in reps:
                entry = dict(out)
                entry["policy"] = spec.name
                entry["gamma"] = spec.gamma
                per_rep.append(entry)
        good = [r for r in reps if r["error"] is None]
        failures = len(reps) - len(good)
        if good:
            theta = np.array([r["theta_hat"] for r in good])
            lo = np.array([r["ci_lo"] for r in good])
            hi = np.array([r["ci_hi"] for r in good])
            errs = theta - theta_true
            row = {
                "policy": spec.name, "gamma": spec.gamma,
                "n_replications": len(good), "failures": failures,
                "mse": float(np.mean(errs ** 2)), "bias": float(np.mean(errs)),
                "var": float(np.var(errs)),
                "coverage": float(np.mean((lo <= theta_true) & (theta_true <= hi))),
                "ci_width_mean": float(np.mean(hi - lo)),
                "mean_n_total": float(np.mean([r["n_total"] for r in good])),
                "mean_n_treated": float(np.mean([r["n_treated"] for r in good])),
                "mean_runtime": float(np.mean([r["runtime"] for r in good])),
            }
        else:
            row = {"policy": spec.name, "gamma": spec.gamma, "n_replications": 0,
                   "failures": failures, "mse": math.nan, "bias": math.nan,
                   "var": math.nan, "coverage": math.nan, "ci_width_mean": math.nan,
                   "mean_n_total": math.nan, "mean_n_treated": math.nan,
                   "mean_runtime": float(np.mean([r["runtime"] for r in reps]))}
        rows.append(row)
    return MetricsTable(rows, per_rep)
