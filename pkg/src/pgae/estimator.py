"""Influence-function estimators and confidence intervals.

Every estimator here consumes a :class:`Trace`, the time-ordered record of
sampled units ``(x, f, delta, delta*y)`` together with the design snapshots
``(p_t(x), pi_t(x), q(x))`` in force when each unit was drawn.  The central
quantity is the estimated influence value

    psi(z; mu, tau) = q(x) / (pi(x) p(x)) * [delta (y - tau(x, f))
                                             - pi(x) (mu(x) - tau(x, f))],

whose mean over records, added to the exact expectation of mu under the
known covariate masses, yields a one-step corrected estimate of the
population mean.  Cross-fitting (fixed designs) or prefix-trained moment
snapshots (adaptive designs) keep the nuisances independent of the record
they are evaluated on.
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from . import design as design_mod
from .errors import DataError, FoldStarvationError
from .nuisance import (
    MIN_TAU_FIT,
    NuisanceConfig,
    NuisanceFit,
    fit_nuisances,
    trivial_fit,
)
from .population import CovariateSpace

METHODS = ("naive", "crossfit", "adaptive", "ipw_only", "ppi")


@dataclass(frozen=True)
class ExperimentRecord:
    """One sampled unit with the design snapshot used at draw time."""

    t: int
    x: float
    f: float
    delta: int
    y: float | None
    snapshot_p: float
    snapshot_pi: float
    q_at_x: float

    def __post_init__(self):
        if self.delta not in (0, 1):
            raise DataError("delta must be 0 or 1")
        if self.delta == 0 and self.y is not None:
            raise DataError("outcome present on an unexperimented record")
        if self.delta == 1 and (self.y is None or not math.isfinite(self.y)):
            raise DataError("experimented record lacks a finite outcome")
        if not (self.snapshot_p > 0 and 0 < self.snapshot_pi <= 1 and self.q_at_x > 0):
            raise DataError("invalid design snapshot")


def influence_value(rec: ExperimentRecord, mu_at_x: float, tau_at_xf: float) -> float:
    """Estimated influence value of a single record given fitted moments."""
    weight = rec.q_at_x / (rec.snapshot_pi * rec.snapshot_p)
    resid = (rec.y - tau_at_xf) if rec.delta == 1 else 0.0
    return weight * (resid - rec.snapshot_pi * (mu_at_x - tau_at_xf))


@dataclass
class Trace:
    """Struct-of-arrays sequence of experiment records."""

    x: np.ndarray
    f: np.ndarray
    delta: np.ndarray
    y: np.ndarray  # NaN where delta == 0
    p_snap: np.ndarray
    pi_snap: np.ndarray
    q_at_x: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(a, dtype=float) for a in
                  (self.x, self.f, self.delta, self.y, self.p_snap, self.pi_snap, self.q_at_x)]
        n = arrays[0].size
        if any(a.shape != (n,) for a in arrays):
            raise DataError("trace columns must be equal-length 1-d arrays")
        self.x, self.f, delta, self.y, self.p_snap, self.pi_snap, self.q_at_x = arrays
        if not np.all((delta == 0) | (delta == 1)):
            raise DataError("delta must be 0/1")
        self.delta = delta.astype(np.int8)
        treated = self.delta == 1
        if not np.all(np.isfinite(self.y[treated])):
            raise DataError("experimented record lacks a finite outcome")
        if np.any(np.isfinite(self.y[~treated])):
            raise DataError("outcome present on an unexperimented record")
        ok = (np.isfinite(self.p_snap) & (self.p_snap > 0)
              & np.isfinite(self.pi_snap) & (self.pi_snap > 0) & (self.pi_snap <= 1.0)
              & np.isfinite(self.q_at_x) & (self.q_at_x > 0))
        if not np.all(ok):
            bad = int(np.flatnonzero(~ok)[0])
            raise DataError(f"record {bad}: invalid design snapshot")

    def __len__(self) -> int:
        return self.x.size

    @property
    def n_treated(self) -> int:
        return int(self.delta.sum())

    def record(self, t: int) -> ExperimentRecord:
        return ExperimentRecord(
            t=t + 1,
            x=float(self.x[t]),
            f=float(self.f[t]),
            delta=int(self.delta[t]),
            y=float(self.y[t]) if self.delta[t] == 1 else None,
            snapshot_p=float(self.p_snap[t]),
            snapshot_pi=float(self.pi_snap[t]),
            q_at_x=float(self.q_at_x[t]),
        )


def _psi(trace: Trace, sl: slice, mu: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Vectorized influence values for a trace slice given moment arrays."""
    delta = trace.delta[sl]
    resid = np.where(delta == 1, np.nan_to_num(trace.y[sl] - tau), 0.0)
    weight = trace.q_at_x[sl] / (trace.pi_snap[sl] * trace.p_snap[sl])
    return weight * (resid - trace.pi_snap[sl] * (mu - tau))


def confidence_interval(theta_hat: float, v_hat: float, n: int, level: float):
    """Normal interval theta_hat +/- z * sqrt(v_hat / n)."""
    if not 0.0 < level < 1.0:
        raise ValueError("confidence level must lie in (0, 1)")
    if v_hat < 0:
        raise ValueError("variance estimate must be non-negative")
    if n < 1:
        raise ValueError("need at least one observation")
    z = float(ndtri(0.5 + level / 2.0))
    half = z * math.sqrt(v_hat / n)
    return theta_hat - half, theta_hat + half


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate, variance estimate, and interval for one method."""

    method: str
    theta_hat: float
    v_hat: float
    n_total: int
    n_treated: int
    ci: tuple[float, float]
    level: float
    notes: tuple[str, ...] = field(default=(), compare=False)
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.v_hat < 0 or self.n_treated > self.n_total:
            raise ValueError("invalid report")
        lo, hi = self.ci
        slack = 1e-12 * max(1.0, abs(self.theta_hat))
        if not (lo - slack <= self.theta_hat <= hi + slack):
            raise ValueError("interval must contain the point estimate")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "theta_hat": self.theta_hat,
            "v_hat": self.v_hat,
            "n_total": self.n_total,
            "n_treated": self.n_treated,
            "ci_lo": self.ci[0],
            "ci_hi": self.ci[1],
            "level": self.level,
        }


def _report(method, contribs, trace, level, notes=(), n_for_ci=None, diagnostics=None):
    theta = float(np.mean(contribs))
    v_hat = float(np.var(contribs, ddof=1)) if contribs.size > 1 else 0.0
    n = int(n_for_ci if n_for_ci is not None else contribs.size)
    ci = confidence_interval(theta, v_hat, n, level)
    return EstimateReport(method, theta, v_hat, int(len(trace)), trace.n_treated, ci,
                          level, notes=tuple(notes), diagnostics=diagnostics or {})


def _check_fixed_design(trace: Trace, cells: np.ndarray) -> None:
    for c in np.unique(cells):
        sel = cells == c
        if (np.unique(trace.p_snap[sel]).size > 1
                or np.unique(trace.pi_snap[sel]).size > 1):
            raise DataError("trace is not a fixed-design trace")


def onestep_estimate(trace: Trace, space: CovariateSpace, fit: NuisanceFit,
                     level: float = 0.95, method: str = "adaptive") -> EstimateReport:
    """Plug-in one-step estimate with a single externally supplied fit."""
    cells = space.locate(trace.x)
    mu = fit.mu_at(cells)
    tau = fit.tau_at(cells, trace.x, trace.f)
    contribs = fit.eq_mu1(space) + _psi(trace, slice(None), mu, tau)
    return _report(method, contribs, trace, level)


def crossfit_estimate(trace: Trace, space: CovariateSpace, k_folds: int = 5,
                      rng: np.random.Generator | None = None,
                      cfg: NuisanceConfig | None = None, level: float = 0.95,
                      v_hat_mode: str = "empirical") -> EstimateReport:
    """K-fold cross-fitted one-step estimator for fixed-design traces.

    Records are split into K random folds; the moment fits for fold k are
    trained on the complement, and each record contributes the exact
    q-expectation of its fold's mu plus its influence value.
    """
    if k_folds < 2:
        raise ValueError("need at least 2 folds")
    if v_hat_mode not in ("empirical", "components"):
        raise ValueError(f"unknown v_hat_mode {v_hat_mode!r}")
    cfg = cfg or NuisanceConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    cells = space.locate(trace.x)
    _check_fixed_design(trace, cells)

    folds = rng.integers(0, k_folds, size=len(trace))
    labeled = trace.delta == 1
    contribs = np.empty(len(trace))
    last_fit = None
    for k in range(k_folds):
        train = folds != k
        n_train_labeled = int(np.sum(train & labeled))
        if n_train_labeled < MIN_TAU_FIT:
            raise FoldStarvationError(
                f"fold {k}: only {n_train_labeled} labeled training records; "
                "use a smaller fold count"
            )
        fit = fit_nuisances(trace.x[train], trace.f[train], trace.delta[train],
                            trace.y[train], space, cfg)
        sel = ~train
        sl = np.flatnonzero(sel)
        mu = fit.mu_at(cells[sl])
        tau = fit.tau_at(cells[sl], trace.x[sl], trace.f[sl])
        contribs[sl] = fit.eq_mu1(space) + _psi(trace, sl, mu, tau)
        last_fit = fit

    diagnostics = {}
    n_for_ci = None
    if v_hat_mode == "components" and last_fit is not None:
        rule = _design_from_trace(trace, space, cells)
        v_comp = design_mod.variance_bound(space, rule, last_fit.components())
        diagnostics["v_hat_components"] = v_comp
        theta = float(np.mean(contribs))
        ci = confidence_interval(theta, v_comp, len(trace), level)
        return EstimateReport("crossfit", theta, v_comp, len(trace), trace.n_treated,
                              ci, level, diagnostics=diagnostics)
    return _report("crossfit", contribs, trace, level, n_for_ci=n_for_ci,
                   diagnostics=diagnostics)


def _design_from_trace(trace: Trace, space: CovariateSpace, cells: np.ndarray):
    """Reconstruct the per-point design of a fixed-design trace."""
    p = np.full(space.size, np.nan)
    pi = np.full(space.size, np.nan)
    p[cells] = trace.p_snap
    pi[cells] = trace.pi_snap
    # Points never sampled get harmless placeholders; they carry no records.
    missing = ~np.isfinite(p)
    p[missing] = np.min(trace.p_snap)
    pi[missing] = 1.0
    p = p / p.sum()
    return design_mod.DesignRule(p, np.clip(pi, None, 1.0), 1.0)


def batch_spans(total: int, batch_size: int):
    """(start, stop) spans of the refit schedule for a trace of ``total``.

    The first two spans are half batches so the full-experimentation warm-up
    stays short; afterwards spans are ``batch_size`` records long.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    half = max(1, batch_size // 2)
    stops = [half, 2 * half]
    while stops[-1] < total:
        stops.append(stops[-1] + batch_size)
    spans = []
    start = 0
    for stop in stops:
        stop = min(stop, total)
        if stop > start:
            spans.append((start, stop))
        start = stop
        if stop >= total:
            break
    return spans


def adaptive_estimate(trace: Trace, space: CovariateSpace,
                      cfg: NuisanceConfig | None = None, batch_size: int = 1000,
                      level: float = 0.95,
                      static_fit: NuisanceFit | None = None,
                      fits: dict | None = None) -> EstimateReport:
    """One-step corrected estimate for adaptively designed traces.

    Moment snapshots for the records of batch b are refit on records of
    earlier batches only, reproducing exactly the fits available to the
    sampler at draw time (given the same batch size and regressor settings).
    Until ``cfg.min_labeled`` labeled records exist the snapshot is the
    zero-knowledge fit.  With ``static_fit`` supplied, the same fit is used
    for every record, which coincides with the single-fold plug-in formula.
    ``fits`` may carry precomputed prefix fits keyed by span start (the
    sampler's own fits); missing entries are refit, with identical results.
    """
    cfg = cfg or NuisanceConfig()
    if not np.all(np.isfinite(trace.p_snap) & np.isfinite(trace.pi_snap)):
        raise DataError("trace not adaptive-complete")
    if static_fit is not None:
        return onestep_estimate(trace, space, static_fit, level, method="adaptive")
    cells = space.locate(trace.x)
    contribs = np.empty(len(trace))
    labeled_cum = np.concatenate([[0], np.cumsum(trace.delta)])
    fit = trivial_fit(space, cfg)
    last_fit = fit
    fits = fits or {}
    spans = batch_spans(len(trace), batch_size)
    # Records of the very first span carry predictions from before any
    # refit could happen; they are excluded from moment training everywhere
    # (run loop and re-estimation alike) so a cold-start predictor cannot
    # poison the outcome-on-prediction fits with high-leverage constants.
    skip = spans[0][1]
    for start, stop in spans:
        if start > skip and labeled_cum[start] - labeled_cum[skip] >= cfg.min_labeled:
            if start in fits:
                fit = fits[start]
            else:
                window = slice(skip, start)
                fit = fit_nuisances(trace.x[window], trace.f[window],
                                    trace.delta[window], trace.y[window], space,
                                    cfg, with_variances=False)
        sl = slice(start, stop)
        mu = fit.mu_at(cells[sl])
        tau = fit.tau_at(cells[sl], trace.x[sl], trace.f[sl])
        contribs[sl] = fit.eq_mu1(space) + _psi(trace, sl, mu, tau)
        last_fit = fit
    diagnostics = {}
    if not (last_fit.info.get("trivial") or last_fit.info.get("first_moment_only")):
        # Companion plug-in variance at the estimated components and the
        # latest snapshot seen for each point, next to the empirical one.
        p = np.full(space.size, np.nan)
        pi = np.full(space.size, np.nan)
        p[cells] = trace.p_snap  # later records overwrite earlier snapshots
        pi[cells] = trace.pi_snap
        missing = ~np.isfinite(p)
        p[missing] = np.min(trace.p_snap)
        pi[missing] = 1.0
        rule = design_mod.DesignRule(p / p.sum(), np.clip(pi, None, 1.0), 1.0)
        diagnostics["v_hat_components"] = design_mod.variance_bound(
            space, rule, last_fit.components()
        )
    return _report("adaptive", contribs, trace, level, diagnostics=diagnostics)


def baseline_estimates(trace: Trace, space: CovariateSpace, kind: str,
                       level: float = 0.95) -> EstimateReport:
    """Reference estimators: sample mean, known-weight stratified, and
    prediction-corrected inverse-probability weighting."""
    labeled = trace.delta == 1
    if kind == "naive":
        ys = trace.y[labeled]
        if ys.size == 0:
            raise DataError("naive estimate needs labeled records")
        theta = float(ys.mean())
        v_hat = float(ys.var(ddof=1)) if ys.size > 1 else 0.0
        ci = confidence_interval(theta, v_hat, ys.size, level)
        return EstimateReport("naive", theta, v_hat, len(trace), trace.n_treated,
                              ci, level)
    if kind == "ipw_only":
        return _stratified_estimate(trace, space, level)
    if kind == "ppi":
        adj = np.where(labeled, np.nan_to_num(trace.y - trace.f), 0.0)
        contribs = trace.f + (labeled / trace.pi_snap) * adj
        return _report("ppi", contribs, trace, level)
    raise ValueError(f"unknown baseline kind {kind!r}")


def _stratified_estimate(trace: Trace, space: CovariateSpace, level: float):
    cells = space.locate(trace.x)
    labeled = trace.delta == 1
    lab_cells = cells[labeled]
    ys = trace.y[labeled]
    if ys.size == 0:
        raise DataError("stratified estimate needs labeled records")
    m = space.size
    counts = np.bincount(lab_cells, minlength=m)
    sums = np.bincount(lab_cells, weights=ys, minlength=m)
    means = sums / np.maximum(counts, 1)
    notes = []
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        present = np.flatnonzero(counts > 0)
        nearest = present[np.argmin(
            np.abs(space.points[present][None, :] - space.points[missing][:, None]),
            axis=1,
        )]
        means[missing] = means[nearest]
        notes.append("empty_strata_nearest_fill:" + ",".join(map(str, missing.tolist())))
    theta = float(space.q_weights @ means)
    share = counts / ys.size
    ratio = np.where(counts > 0, space.q_weights / np.maximum(share, 1e-300), 0.0)
    terms = theta + ratio[lab_cells] * (ys - means[lab_cells])
    v_hat = float(np.var(terms, ddof=1)) if terms.size > 1 else 0.0
    ci = confidence_interval(theta, v_hat, ys.size, level)
    return EstimateReport("ipw_only", theta, v_hat, len(trace), trace.n_treated,
                          ci, level, notes=tuple(notes))


# ---------------------------------------------------------------------------
# Trace file format
# ---------------------------------------------------------------------------

TRACE_HEADER = ["t", "x", "f", "delta", "y", "p_snapshot", "pi_snapshot", "q_at_x"]


def write_trace(trace: Trace, path) -> None:
    """Write the CSV trace format (empty outcome cell when delta = 0)."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_HEADER)
            for t in range(len(trace)):
                y = repr(float(trace.y[t])) if trace.delta[t] == 1 else ""
                writer.writerow([
                    t + 1, repr(float(trace.x[t])), repr(float(trace.f[t])),
                    int(trace.delta[t]), y, repr(float(trace.p_snap[t])),
                    repr(float(trace.pi_snap[t])), repr(float(trace.q_at_x[t])),
                ])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_trace(path) -> Trace:
    """Parse a trace CSV; schema violations name the offending record."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open trace file: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_HEADER:
            raise DataError(f"bad trace header: expected {TRACE_HEADER}, got {header}")
        cols = {name: [] for name in TRACE_HEADER}
        prev_t = 0
        for recnum, row in enumerate(reader, start=1):
            if len(row) != len(TRACE_HEADER):
                raise DataError(f"record {recnum}: wrong field count")
            try:
                t = int(row[0])
                delta = int(row[3])
                vals = [float(row[i]) for i in (1, 2, 5, 6, 7)]
                y = float(row[4]) if row[4].strip() else math.nan
            except ValueError as exc:
                raise DataError(f"record {recnum}: {exc}") from None
            if t <= prev_t:
                raise DataError(f"record {recnum}: step indices must increase")
            prev_t = t
            if delta == 0 and row[4].strip():
                raise DataError(f"record {recnum}: outcome present with delta=0")
            if delta == 1 and not row[4].strip():
                raise DataError(f"record {recnum}: missing outcome with delta=1")
            cols["t"].append(t)
            cols["x"].append(vals[0])
            cols["f"].append(vals[1])
            cols["delta"].append(delta)
            cols["y"].append(y)
            cols["p_snapshot"].append(vals[2])
            cols["pi_snapshot"].append(vals[3])
            cols["q_at_x"].append(vals[4])
    if not cols["t"]:
        raise DataError("trace file has no records")
    try:
        return Trace(
            x=np.asarray(cols["x"]), f=np.asarray(cols["f"]),
            delta=np.asarray(cols["delta"]), y=np.asarray(cols["y"]),
            p_snap=np.asarray(cols["p_snapshot"]), pi_snap=np.asarray(cols["pi_snapshot"]),
            q_at_x=np.asarray(cols["q_at_x"]),
        )
    except DataError as exc:
        raise DataError(f"trace schema violation: {exc}") from None
