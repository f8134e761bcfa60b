"""Command-line front end: design computation, simulation studies, re-estimation.

Subcommands:
  design    compute the optimal design for a configured space and budget
  simulate  run a replication study and write metrics CSV/JSON
  estimate  re-estimate from a saved trace CSV

All machine-readable output goes to files or stdout; progress goes to
stderr.  Exit codes: 0 success, 2 config error, 3 data error, 4 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import design as design_mod
from .datasets import CENSUS_SCHEMA
from .design import DesignRule, VarianceComponents
from .errors import ConfigError, DataError, PgaeError
from .estimator import adaptive_estimate, baseline_estimates, crossfit_estimate, read_trace
from .harness import (
    MetricsTable,
    PolicySpec,
    _atomic_write,
    oracle_world_components,
    replicate,
)
from .nuisance import NuisanceConfig
from .population import (
    FinitePopulation,
    PopulationSchema,
    SyntheticDgp,
    load_population,
    make_grid_space,
)
from .rng import stream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _require_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(sorted(unknown))}")


@dataclass
class RunConfig:
    """Validated experiment configuration; mirrors the JSON schema."""

    world: dict
    space: dict
    policies: list
    n_reps: int = 100
    seed: int = 0
    output_dir: str = "out"
    estimator: dict = field(default_factory=dict)
    design: dict = field(default_factory=dict)
    dump_reps: bool = False

    TOP_KEYS = {"world", "space", "policies", "n_reps", "seed", "output_dir",
                "estimator", "design", "dump_reps"}
    WORLD_KEYS = {"kind", "noise_scale", "noise_frequency", "predictor_mode",
                  "path", "covariates", "features", "outcome"}
    SPACE_KEYS = {"kind", "lo", "hi", "m"}
    POLICY_KEYS = {"name", "gamma", "treated_target", "batch_size", "regressor",
                   "predictor_mode"}
    EST_KEYS = {"k_folds", "ci_level", "batch_size", "regressor", "n_f_bins",
                "knn_k", "var_min", "var_max", "min_labeled", "min_cell_labeled",
                "v_hat_mode"}
    DESIGN_KEYS = {"gamma", "n_mc", "seed", "components"}

    @classmethod
    def parse(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        _require_keys(raw, cls.TOP_KEYS, "config")
        for key in ("world", "space"):
            if key not in raw or not isinstance(raw[key], dict):
                raise ConfigError(f"config requires a {key!r} object")
        _require_keys(raw["world"], cls.WORLD_KEYS, "world")
        _require_keys(raw["space"], cls.SPACE_KEYS, "space")
        policies = raw.get("policies", [])
        if not isinstance(policies, list):
            raise ConfigError("policies must be a list")
        for i, pol in enumerate(policies):
            if not isinstance(pol, dict):
                raise ConfigError(f"policy {i} must be an object")
            _require_keys(pol, cls.POLICY_KEYS, f"policy {i}")
            for key in ("name", "gamma", "treated_target"):
                if key not in pol:
                    raise ConfigError(f"policy {i} missing {key!r}")
        _require_keys(raw.get("estimator", {}), cls.EST_KEYS, "estimator")
        _require_keys(raw.get("design", {}), cls.DESIGN_KEYS, "design")
        cfg = cls(
            world=dict(raw["world"]), space=dict(raw["space"]),
            policies=[dict(p) for p in policies],
            n_reps=int(raw.get("n_reps", 100)), seed=int(raw.get("seed", 0)),
            output_dir=str(raw.get("output_dir", "out")),
            estimator=dict(raw.get("estimator", {})),
            design=dict(raw.get("design", {})),
            dump_reps=bool(raw.get("dump_reps", False)),
        )
        if cfg.n_reps < 1:
            raise ConfigError("n_reps must be positive")
        cfg.build_policy_specs()  # validate eagerly
        if "PGAE_SEED" in os.environ:
            cfg.seed = int(os.environ["PGAE_SEED"])
        if "PGAE_OUTPUT_DIR" in os.environ:
            cfg.output_dir = os.environ["PGAE_OUTPUT_DIR"]
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.parse(raw)

    def to_dict(self) -> dict:
        return {
            "world": self.world, "space": self.space, "policies": self.policies,
            "n_reps": self.n_reps, "seed": self.seed, "output_dir": self.output_dir,
            "estimator": self.estimator, "design": self.design,
            "dump_reps": self.dump_reps,
        }

    def build_world(self):
        kind = self.world.get("kind")
        if kind == "synthetic":
            try:
                return SyntheticDgp(
                    noise_scale=float(self.world.get("noise_scale", 2.0)),
                    noise_frequency=float(self.world.get("noise_frequency", 1.5 * math.pi)),
                    predictor_mode=self.world.get("predictor_mode", "oracle_linear"),
                )
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if kind == "population":
            path = self.world.get("path")
            if not path:
                raise ConfigError("population world requires 'path'")
            if "covariates" in self.world:
                schema = PopulationSchema(
                    covariates=tuple(self.world["covariates"]),
                    features=tuple(self.world.get("features", [])),
                    outcome=self.world.get("outcome", "outcome"),
                )
            else:
                schema = CENSUS_SCHEMA
            return load_population(path, schema)
        raise ConfigError(f"unknown world kind {kind!r}")

    def build_space(self, world):
        kind = self.space.get("kind")
        if kind == "grid":
            try:
                return make_grid_space(float(self.space["lo"]), float(self.space["hi"]),
                                       int(self.space["m"]))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"bad grid space: {exc}") from None
        if kind == "strata":
            if not isinstance(world, FinitePopulation):
                raise ConfigError("strata space requires a population world")
            return world.space()
        raise ConfigError(f"unknown space kind {kind!r}")

    def build_policy_specs(self) -> list:
        specs = []
        for i, pol in enumerate(self.policies):
            try:
                specs.append(PolicySpec(
                    name=pol["name"], gamma=float(pol["gamma"]),
                    treated_target=int(pol["treated_target"]),
                    batch_size=int(pol.get("batch_size", self.estimator.get("batch_size", 1000))),
                    regressor=pol.get("regressor", self.estimator.get("regressor", "binned_mean")),
                    predictor_mode=pol.get("predictor_mode", "auto"),
                ))
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"policy {i}: {exc}") from None
        return specs

    def nuisance_config(self) -> NuisanceConfig:
        est = self.estimator
        try:
            return NuisanceConfig(
                regressor=est.get("regressor", "binned_mean"),
                n_f_bins=int(est.get("n_f_bins", 10)),
                knn_k=int(est.get("knn_k", 25)),
                var_min=float(est.get("var_min", 1e-4)),
                var_max=float(est.get("var_max", 1e6)),
                min_labeled=int(est.get("min_labeled", 50)),
                min_cell_labeled=int(est.get("min_cell_labeled", 5)),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def ci_level(self) -> float:
        level = float(self.estimator.get("ci_level", 0.95))
        if not 0.0 < level < 1.0:
            raise ConfigError("ci_level must lie in (0, 1)")
        return level


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_design(config: RunConfig, out_dir: str) -> int:
    """Write design.csv and bound.json; print the efficiency ratio."""
    world = config.build_world()
    space = config.build_space(world)
    section = config.design
    if "gamma" not in section:
        raise ConfigError("design section requires 'gamma'")
    gamma = float(section["gamma"])
    if "components" in section:
        comp = section["components"]
        _require_keys(comp, {"alpha", "beta"}, "design.components")
        try:
            vc = VarianceComponents(np.asarray(comp["alpha"], dtype=float),
                                    np.asarray(comp["beta"], dtype=float))
        except ValueError as exc:
            raise ConfigError(f"bad components: {exc}") from None
        if vc.alpha.shape != space.q_weights.shape:
            raise ConfigError("components length must match the space")
    else:
        vc = oracle_world_components(
            world, space,
            n_mc=int(section.get("n_mc", 100_000)),
            seed=int(section.get("seed", 91)),
        )
    rule = design_mod.optimal_design(space, vc, gamma)
    v_opt = design_mod.variance_bound(space, rule, vc)
    naive_rule = DesignRule(space.q_weights.copy(), np.ones(space.size), 1.0)
    v_naive = design_mod.variance_bound(space, naive_rule, vc)
    closed = design_mod.optimal_bound_closed_form(space, vc, gamma)

    os.makedirs(out_dir, exist_ok=True)
    lines = ["point,q,p,pi"]
    for point, q, p, pi in design_mod.design_rows(space, rule):
        lines.append(f"{point!r},{q!r},{p!r},{pi!r}")
    _atomic_write(os.path.join(out_dir, "design.csv"), "\n".join(lines) + "\n")
    payload = {
        "gamma": gamma,
        "v_optimal": v_opt,
        "v_naive_full_experimentation": v_naive,
        "efficiency_ratio": v_opt / v_naive if v_naive > 0 else math.nan,
        "closed_form": closed,
        "budget_usage": design_mod.budget_usage(rule),
        "notes": list(rule.notes),
    }
    _atomic_write(os.path.join(out_dir, "bound.json"),
                  json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"efficiency_ratio {payload['efficiency_ratio']!r}")
    return EXIT_OK


def cmd_simulate(config: RunConfig, out_dir: str, jobs: int, n_reps: int | None) -> int:
    """Run the configured replication study and write metrics files."""
    world = config.build_world()
    space = config.build_space(world)
    specs = config.build_policy_specs()
    if not specs:
        raise ConfigError("simulate requires at least one policy")
    reps = n_reps if n_reps is not None else config.n_reps
    _log(f"simulate: {len(specs)} policies x {reps} replications (jobs={jobs})")
    table = replicate(specs, world, space, reps, config.seed, jobs=jobs,
                      nuisance_cfg=config.nuisance_config(), level=config.ci_level(),
                      keep_reps=config.dump_reps)
    os.makedirs(out_dir, exist_ok=True)
    table.to_csv(os.path.join(out_dir, "metrics.csv"))
    table.to_json(os.path.join(out_dir, "metrics.json"))
    if config.dump_reps and table.per_rep is not None:
        cols = ["policy", "gamma", "rep", "error", "theta_hat", "ci_lo", "ci_hi",
                "n_total", "n_treated", "runtime"]
        lines = [",".join(cols)]
        for entry in table.per_rep:
            lines.append(",".join("" if entry.get(c) is None else
                                  (repr(entry[c]) if isinstance(entry[c], float)
                                   else str(entry[c])) for c in cols))
        _atomic_write(os.path.join(out_dir, "reps.csv"), "\n".join(lines) + "\n")
    failures = sum(row["failures"] for row in table.rows)
    if failures and all(row["n_replications"] == 0 for row in table.rows):
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_estimate(config: RunConfig, trace_path: str, method: str, out_dir: str) -> int:
    """Re-estimate from a saved trace; prints and writes the report JSON."""
    world = config.build_world()
    space = config.build_space(world)
    trace = read_trace(trace_path)
    cfg = config.nuisance_config()
    level = config.ci_level()
    if method == "crossfit":
        report = crossfit_estimate(
            trace, space, k_folds=int(config.estimator.get("k_folds", 5)),
            rng=stream(config.seed), cfg=cfg, level=level,
            v_hat_mode=config.estimator.get("v_hat_mode", "empirical"),
        )
    elif method == "adaptive":
        report = adaptive_estimate(
            trace, space, cfg=cfg,
            batch_size=int(config.estimator.get("batch_size", 1000)), level=level,
        )
    elif method in ("naive", "ipw_only", "ppi"):
        report = baseline_estimates(trace, space, method, level=level)
    else:
        raise ConfigError(f"unknown estimation method {method!r}")
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write(os.path.join(out_dir, "estimate.json"), text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pgae",
        description="Prediction-guided active experimentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override")

    p_design = sub.add_parser("design", help="compute the optimal design")
    common(p_design)

    p_sim = sub.add_parser("simulate", help="run a replication study")
    common(p_sim)
    p_sim.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p_sim.add_argument("--reps", type=int, default=None, help="override n_reps")

    p_est = sub.add_parser("estimate", help="re-estimate from a trace CSV")
    common(p_est)
    p_est.add_argument("--trace", required=True, help="path to the trace CSV")
    p_est.add_argument("--method", default="adaptive",
                       choices=["adaptive", "crossfit", "naive", "ipw_only", "ppi"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig.load(args.config)
        if args.seed is not None:
            config.seed = args.seed
        out_dir = args.out if args.out is not None else config.output_dir
        if args.command == "design":
            return cmd_design(config, out_dir)
        if args.command == "simulate":
            return cmd_simulate(config, out_dir, jobs=max(1, args.jobs), n_reps=args.reps)
        return cmd_estimate(config, args.trace, args.method, out_dir)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except DataError as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except PgaeError as exc:
        _log(f"runtime failure: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
