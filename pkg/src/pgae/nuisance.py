"""Conditional-moment estimation driving the adaptive design updates.

Pipeline, all indexed by the points of a covariate space:

1. regress y and y^2 on (x, f) over labeled records -> tau1, tau2;
2. regress tau1(x, f) and tau1(x, f)^2 on x over all records -> mu1, mu2
   (predictions are observed for every sampled record, labeled or not);
3. alpha_hat = mu2 - mu1^2 and beta_hat = per-point mean of tau2 - tau1^2,
   both truncated into [var_min, var_max].

``update_design`` then renormalizes the estimated components into the
normalize-then-cap sampling rule used between batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import design as design_mod
from .design import VarianceComponents, DesignRule
from .errors import InsufficientLabeledDataError
from .population import CovariateSpace

MIN_TAU_FIT = 10


@dataclass(frozen=True)
class NuisanceConfig:
    """Knobs for the conditional-moment regressors and truncation."""

    regressor: str = "binned_mean"  # binned_mean | least_squares | knn
    n_f_bins: int = 10
    knn_k: int = 25
    var_min: float = 1e-4
    var_max: float = 1e6
    min_labeled: int = 50
    min_cell_labeled: int = 5

    def __post_init__(self):
        if self.regressor not in ("binned_mean", "least_squares", "knn"):
            raise ValueError(f"unknown regressor kind {self.regressor!r}")
        if not (0 < self.var_min < self.var_max):
            raise ValueError("require 0 < var_min < var_max")
        if self.n_f_bins < 1 or self.knn_k < 1 or self.min_cell_labeled < 1:
            raise ValueError("bin, neighbour, and cell-count knobs must be positive")


# ---------------------------------------------------------------------------
# Regressors over (cell, f)
# ---------------------------------------------------------------------------


class _ConstantRegressor:
    def __init__(self, value: float = 0.0):
        self.value = float(value)

    def predict(self, cells, x, f):
        return np.full(np.asarray(cells).shape, self.value)


class BinnedMeanRegressor:
    """Per (cell, f-quantile-bin) means, falling back to cell then global mean."""

    def __init__(self, n_cells: int, n_f_bins: int):
        self.n_cells = n_cells
        self.n_f_bins = n_f_bins
        self._edges = None
        self._table = None

    def fit(self, cells, x, f, y):
        probs = np.linspace(0.0, 1.0, self.n_f_bins + 1)[1:-1]
        self._edges = np.unique(np.quantile(f, probs)) if probs.size else np.empty(0)
        width = self._edges.size + 1
        flat = cells * width + np.searchsorted(self._edges, f, side="right")
        n_flat = self.n_cells * width
        sums = np.bincount(flat, weights=y, minlength=n_flat)
        counts = np.bincount(flat, minlength=n_flat)
        cell_sums = np.bincount(cells, weights=y, minlength=self.n_cells)
        cell_counts = np.bincount(cells, minlength=self.n_cells)
        overall = float(np.mean(y))
        cell_mean = np.where(cell_counts > 0, cell_sums / np.maximum(cell_counts, 1), overall)
        table = np.where(counts > 0, sums / np.maximum(counts, 1),
                         np.repeat(cell_mean, width))
        self._table = table
        return self

    def predict(self, cells, x, f):
        width = self._edges.size + 1
        flat = cells * width + np.searchsorted(self._edges, f, side="right")
        return self._table[flat]


def _window_sums(per_cell: np.ndarray, half: np.ndarray) -> np.ndarray:
    """Sum each statistic over the window [i - half_i, i + half_i] per cell."""
    prefix = np.concatenate([[0.0], np.cumsum(per_cell)])
    m = per_cell.size
    lo = np.maximum(np.arange(m) - half, 0)
    hi = np.minimum(np.arange(m) + half, m - 1)
    return prefix[hi + 1] - prefix[lo]


def _window_half_widths(counts: np.ndarray, need: int) -> np.ndarray:
    """Smallest symmetric cell window holding at least ``need`` points.

    Cells starved of labeled data (by design, where experimentation is rare)
    borrow strength from neighbours instead of collapsing to a global fit,
    which would otherwise be amplified by the inverse-probability weights.
    """
    m = counts.size
    half = np.zeros(m, dtype=np.int64)
    pending = _window_sums(counts, half) < need
    width = 0
    while np.any(pending) and width < m:
        width += 1
        half[pending] = width
        pending = _window_sums(counts, half) < need
    return half


class PerCellLinearRegressor:
    """Least squares of the target on f within an adaptive cell window."""

    MIN_EFFECTIVE = 24

    def __init__(self, n_cells: int, min_cell: int):
        self.n_cells = n_cells
        self.min_cell = min_cell
        self._icept = None
        self._slope = None

    def fit(self, cells, x, f, y):
        m = self.n_cells
        n = np.bincount(cells, minlength=m).astype(float)
        stats = [n]
        for w in (f, y, f * f, f * y):
            stats.append(np.bincount(cells, weights=w, minlength=m))
        need = max(self.min_cell, self.MIN_EFFECTIVE)
        half = _window_half_widths(n, need)
        # Cells with enough of their own data keep a pure per-cell fit.
        half[n >= need] = 0
        wn, wf, wy, wff, wfy = (_window_sums(s, half) for s in stats)
        safe = np.maximum(wn, 1.0)
        fmean, ymean = wf / safe, wy / safe
        varf = wff / safe - fmean ** 2
        covfy = wfy / safe - fmean * ymean
        py = float(np.mean(y))
        ok = (wn >= 2) & (varf > 1e-12)
        slope = np.where(ok, covfy / np.where(ok, varf, 1.0), 0.0)
        icept = np.where(wn > 0, ymean - slope * fmean, py)
        self._icept, self._slope = icept, slope
        return self

    def predict(self, cells, x, f):
        return self._icept[cells] + self._slope[cells] * f


class PerCellQuadraticRegressor:
    """Least squares on [1, f, f^2] within an adaptive cell window."""

    MIN_EFFECTIVE = 32

    def __init__(self, n_cells: int, min_cell: int):
        self.n_cells = n_cells
        self.min_cell = max(min_cell, 4)
        self._coef = None  # (m, 3) on f centered at the window mean
        self._fmean = None

    @staticmethod
    def _solve(moments, rhs):
        n, s1, s2, s3, s4 = moments
        mat = np.stack(
            [np.stack([n, s1, s2], axis=-1),
             np.stack([s1, s2, s3], axis=-1),
             np.stack([s2, s3, s4], axis=-1)],
            axis=-2,
        )
        ridge = np.stack([np.maximum(n, 1.0), np.maximum(s2, 1e-9),
                          np.maximum(s4, 1e-9)], axis=-1) * 1e-9
        mat = mat + ridge[..., None] * np.eye(3)
        return np.linalg.solve(mat, np.stack(rhs, axis=-1)[..., None])[..., 0]

    def fit(self, cells, x, f, y):
        m = self.n_cells
        n = np.bincount(cells, minlength=m).astype(float)
        need = max(self.min_cell, self.MIN_EFFECTIVE)
        half = _window_half_widths(n, need)
        half[n >= need] = 0
        wn = _window_sums(n, half)
        wf = _window_sums(np.bincount(cells, weights=f, minlength=m), half)
        fmean = np.where(wn > 0, wf / np.maximum(wn, 1.0), float(np.mean(f)))
        fc = f - fmean[cells]
        # Window sums of centered powers are only exact when the window
        # center matches, so accumulate uncentered and shift per window.
        pows = {k: np.bincount(cells, weights=f ** k, minlength=m) for k in (1, 2, 3, 4)}
        rs = {k: np.bincount(cells, weights=y * f ** k, minlength=m) for k in (0, 1, 2)}
        w1, w2, w3, w4 = (_window_sums(pows[k], half) for k in (1, 2, 3, 4))
        r0, r1, r2 = (_window_sums(rs[k], half) for k in (0, 1, 2))
        mu = fmean
        # Centered moments via the binomial shift f_c = f - mu.
        c1 = w1 - wn * mu
        c2 = w2 - 2 * mu * w1 + wn * mu ** 2
        c3 = w3 - 3 * mu * w2 + 3 * mu ** 2 * w1 - wn * mu ** 3
        c4 = w4 - 4 * mu * w3 + 6 * mu ** 2 * w2 - 4 * mu ** 3 * w1 + wn * mu ** 4
        d0 = r0
        d1 = r1 - mu * r0
        d2 = r2 - 2 * mu * r1 + mu ** 2 * r0
        coef = self._solve((np.maximum(wn, 1.0), c1, c2, c3, c4), (d0, d1, d2))
        coef[wn == 0] = np.array([float(np.mean(y)), 0.0, 0.0])
        self._coef = coef
        self._fmean = fmean
        return self

    def predict(self, cells, x, f):
        fc = f - self._fmean[cells]
        c = self._coef[cells]
        return c[:, 0] + c[:, 1] * fc + c[:, 2] * fc * fc


class GridPolynomialRegressor:
    """Global least squares on [1, x, f, xf, x^2, f^2] for quadrature grids.

    Pools every labeled record into one smooth surface, so cells starved of
    labeled data inherit strength from the whole sample; used for the first
    conditional moment where the signal is smooth in (x, f).
    """

    def __init__(self):
        self._coef = None

    @staticmethod
    def _design(x, f):
        return np.column_stack([np.ones(x.size), x, f, x * f, x * x, f * f])

    def fit(self, cells, x, f, y):
        design = self._design(x, f)
        gram = design.T @ design
        gram[np.diag_indices_from(gram)] += 1e-8 * max(1.0, float(np.trace(gram)) / 6.0)
        self._coef = np.linalg.solve(gram, design.T @ y)
        return self

    def predict(self, cells, x, f):
        return self._design(np.asarray(x, dtype=float), np.asarray(f, dtype=float)) @ self._coef


class KnnRegressor:
    """k-nearest-neighbour mean over standardized (x, f)."""

    def __init__(self, n_cells: int, k: int):
        self.k = k
        self._tree = None
        self._y = None
        self._center = None
        self._scale = None

    def fit(self, cells, x, f, y):
        pts = np.column_stack([x, f])
        self._center = pts.mean(axis=0)
        std = pts.std(axis=0)
        self._scale = np.where(std > 0, std, 1.0)
        self._tree = cKDTree((pts - self._center) / self._scale)
        self._y = np.asarray(y, dtype=float)
        return self

    def predict(self, cells, x, f):
        pts = (np.column_stack([x, f]) - self._center) / self._scale
        k = min(self.k, self._y.size)
        _, idx = self._tree.query(pts, k=k)
        return self._y[np.atleast_2d(idx)].mean(axis=1)


class _EnvelopeClamped:
    """Clamp predictions into the (padded) range of the training targets.

    The estimators' weights can be large where experimentation is rare, so
    unbounded extrapolation of a starved fit is the main failure mode this
    guards against; for well-fit regions the clamp never binds.
    """

    def __init__(self, raw, lo: float, hi: float):
        self.raw = raw
        self.lo = lo
        self.hi = hi

    def predict(self, cells, x, f):
        return np.clip(self.raw.predict(cells, x, f), self.lo, self.hi)


class _ClampedSecondMoment:
    """Second-moment regressor clamped at tau1^2 so implied variance >= 0."""

    def __init__(self, tau1, raw):
        self.tau1 = tau1
        self.raw = raw

    def predict(self, cells, x, f):
        base = self.tau1.predict(cells, x, f)
        return np.maximum(self.raw.predict(cells, x, f), base * base)


def _make_regressors(space: CovariateSpace, cfg: NuisanceConfig):
    m = space.size
    if cfg.regressor == "binned_mean":
        return (BinnedMeanRegressor(m, cfg.n_f_bins), BinnedMeanRegressor(m, cfg.n_f_bins))
    if cfg.regressor == "least_squares":
        # Grids get a pooled smooth surface for the first moment; the second
        # moment stays local because conditional variances need not be smooth
        # polynomials.  Discrete strata have no metric, so both stay local.
        from .population import GRID as _GRID

        first = (GridPolynomialRegressor() if space.kind == _GRID
                 else PerCellLinearRegressor(m, cfg.min_cell_labeled))
        return (first, PerCellQuadraticRegressor(m, cfg.min_cell_labeled))
    return (KnnRegressor(m, cfg.knn_k), KnnRegressor(m, cfg.knn_k))


# ---------------------------------------------------------------------------
# Fitting steps
# ---------------------------------------------------------------------------


def fit_tau(x, f, y, space: CovariateSpace, cfg: NuisanceConfig | None = None):
    """Fit tau1 ~ E[Y|X,F] and tau2 ~ E[Y^2|X,F] on labeled records."""
    cfg = cfg or NuisanceConfig()
    x = np.asarray(x, dtype=float)
    f = np.asarray(f, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.size < MIN_TAU_FIT:
        raise InsufficientLabeledDataError(
            f"insufficient labeled data: {y.size} < {MIN_TAU_FIT}"
        )
    cells = space.locate(x)
    reg1, reg2 = _make_regressors(space, cfg)
    y_lo, y_hi = float(np.min(y)), float(np.max(y))
    pad = 0.25 * max(y_hi - y_lo, 1e-12)
    tau1 = _EnvelopeClamped(reg1.fit(cells, x, f, y), y_lo - pad, y_hi + pad)
    y2_hi = max(abs(y_lo - pad), abs(y_hi + pad)) ** 2
    raw2 = _EnvelopeClamped(reg2.fit(cells, x, f, y * y), 0.0, y2_hi)
    tau2 = _ClampedSecondMoment(tau1, raw2)
    return tau1, tau2


def _fit_tau_first_moment(x, f, y, space: CovariateSpace, cfg: NuisanceConfig):
    """tau1 only; identical to the first element of :func:`fit_tau`."""
    x = np.asarray(x, dtype=float)
    f = np.asarray(f, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.size < MIN_TAU_FIT:
        raise InsufficientLabeledDataError(
            f"insufficient labeled data: {y.size} < {MIN_TAU_FIT}"
        )
    cells = space.locate(x)
    reg1, _ = _make_regressors(space, cfg)
    y_lo, y_hi = float(np.min(y)), float(np.max(y))
    pad = 0.25 * max(y_hi - y_lo, 1e-12)
    return _EnvelopeClamped(reg1.fit(cells, x, f, y), y_lo - pad, y_hi + pad)


def _nearest_fill(values: np.ndarray, counts: np.ndarray, space: CovariateSpace):
    """Fill cells with no observations from the nearest populated cell."""
    missing = np.flatnonzero(counts == 0)
    if missing.size == 0:
        return values, ()
    present = np.flatnonzero(counts > 0)
    if present.size == 0:
        raise ValueError("no records at any point of the space")
    nearest = present[np.argmin(
        np.abs(space.points[present][None, :] - space.points[missing][:, None]), axis=1
    )]
    out = values.copy()
    out[missing] = values[nearest]
    return out, tuple(int(i) for i in missing)


def fit_mu(x, f, tau1, space: CovariateSpace):
    """Per-point means of tau1 and tau1^2 over all sampled records.

    Uses every record regardless of labeling, since predictions are observed
    for each sample.  Points with no records are filled from the nearest
    populated point and reported as gaps.
    """
    x = np.asarray(x, dtype=float)
    f = np.asarray(f, dtype=float)
    if x.size == 0:
        raise ValueError("no records to aggregate")
    cells = space.locate(x)
    t = np.asarray(tau1.predict(cells, x, f), dtype=float)
    m = space.size
    counts = np.bincount(cells, minlength=m)
    safe = np.maximum(counts, 1)
    mu1 = np.bincount(cells, weights=t, minlength=m) / safe
    mu2 = np.bincount(cells, weights=t * t, minlength=m) / safe
    mu1, gaps = _nearest_fill(mu1, counts, space)
    mu2, _ = _nearest_fill(mu2, counts, space)
    return mu1, mu2, gaps


def estimate_components(tau1, tau2, mu1, mu2, x, f, space: CovariateSpace,
                        cfg: NuisanceConfig | None = None):
    """Derive truncated (alpha_hat, beta_hat) from the fitted moments."""
    cfg = cfg or NuisanceConfig()
    lo, hi = cfg.var_min, cfg.var_max
    alpha_raw = mu2 - mu1 * mu1
    alpha = np.clip(alpha_raw, lo, hi)

    x = np.asarray(x, dtype=float)
    f = np.asarray(f, dtype=float)
    cells = space.locate(x)
    t1 = np.asarray(tau1.predict(cells, x, f), dtype=float)
    t2 = np.asarray(tau2.predict(cells, x, f), dtype=float)
    spread = np.maximum(t2 - t1 * t1, 0.0)
    m = space.size
    counts = np.bincount(cells, minlength=m)
    beta_raw = np.bincount(cells, weights=spread, minlength=m) / np.maximum(counts, 1)
    beta_raw, beta_gaps = _nearest_fill(beta_raw, counts, space)
    beta = np.clip(beta_raw, lo, hi)

    info = {
        "alpha_clamped": int(np.sum((alpha_raw < lo) | (alpha_raw > hi))),
        "beta_clamped": int(np.sum((beta_raw < lo) | (beta_raw > hi))),
        "beta_gaps": beta_gaps,
    }
    vc = VarianceComponents(alpha, beta)
    assert np.all(np.isfinite(vc.alpha)) and np.all(np.isfinite(vc.beta))
    return vc, info


@dataclass(frozen=True)
class NuisanceFit:
    """Bundle of fitted moments over a space, plus truncation bookkeeping."""

    tau1: object
    tau2: object
    mu1: np.ndarray
    mu2: np.ndarray
    alpha_hat: np.ndarray
    beta_hat: np.ndarray
    trunc: tuple[float, float]
    info: dict = field(default_factory=dict, compare=False)

    def mu_at(self, cells) -> np.ndarray:
        return self.mu1[cells]

    def tau_at(self, cells, x, f) -> np.ndarray:
        return np.asarray(self.tau1.predict(cells, x, f), dtype=float)

    def eq_mu1(self, space: CovariateSpace) -> float:
        """Exact expectation of mu1 under the known point masses."""
        return float(space.q_weights @ self.mu1)

    def components(self) -> VarianceComponents:
        return VarianceComponents(self.alpha_hat, self.beta_hat)


def trivial_fit(space: CovariateSpace, cfg: NuisanceConfig | None = None) -> NuisanceFit:
    """Zero-knowledge fit used before any labeled data exists."""
    cfg = cfg or NuisanceConfig()
    m = space.size
    zero = _ConstantRegressor(0.0)
    floor = np.full(m, cfg.var_min)
    return NuisanceFit(zero, zero, np.zeros(m), np.zeros(m), floor, floor.copy(),
                       (cfg.var_min, cfg.var_max), {"trivial": True})


def fit_nuisances(x, f, delta, y, space: CovariateSpace,
                  cfg: NuisanceConfig | None = None,
                  with_variances: bool = True) -> NuisanceFit:
    """Run the full moment-fitting pipeline on a record prefix.

    ``with_variances=False`` skips the second-moment regression and the
    variance components (placeholders at var_min); the one-step estimator
    only consumes the first moments, so this is a pure speed knob that
    cannot change estimates.
    """
    cfg = cfg or NuisanceConfig()
    x = np.asarray(x, dtype=float)
    f = np.asarray(f, dtype=float)
    delta = np.asarray(delta)
    labeled = delta == 1
    if with_variances:
        tau1, tau2 = fit_tau(x[labeled], f[labeled],
                             np.asarray(y, dtype=float)[labeled], space, cfg)
    else:
        tau1 = _fit_tau_first_moment(x[labeled], f[labeled],
                                     np.asarray(y, dtype=float)[labeled], space, cfg)
        tau2 = None
    mu1, mu2, gaps = fit_mu(x, f, tau1, space)
    if with_variances:
        vc, info = estimate_components(tau1, tau2, mu1, mu2, x, f, space, cfg)
        alpha, beta = vc.alpha, vc.beta
    else:
        alpha = np.full(space.size, cfg.var_min)
        beta = np.full(space.size, cfg.var_min)
        info = {"first_moment_only": True}
    info["mu_gaps"] = gaps
    return NuisanceFit(tau1, tau2, mu1, mu2, alpha, beta,
                       (cfg.var_min, cfg.var_max), info)


def update_design(space: CovariateSpace, vc: VarianceComponents, gamma: float,
                  stability_floor: float = 0.1) -> DesignRule:
    """Normalize-then-cap design from estimated components (adaptive rule).

    Estimated components are floored at ``stability_floor`` times the mean
    root component before normalizing.  This enforces p(x) and pi(x) bounded
    away from zero relative to their scale: an early underestimate of a
    cell's component would otherwise choke off its sampling, freeze its fit,
    and lock the underestimate in, while the inverse-probability weights
    q/(pi p) blow up.  Pass 0 for the unguarded normalize-then-cap rule.
    """
    if not 0.0 <= stability_floor < 1.0:
        raise ValueError("stability_floor must lie in [0, 1)")
    if stability_floor == 0.0 or np.all(vc.alpha < design_mod.VAR_FLOOR):
        return design_mod.capped_design(space, vc, gamma)
    q = space.q_weights
    floor_a = (stability_floor * float(q @ np.sqrt(vc.alpha))) ** 2
    a_eff = np.maximum(vc.alpha, floor_a)
    p = q * np.sqrt(a_eff)
    p /= p.sum()
    floor_b = (stability_floor * float(p @ np.sqrt(vc.beta))) ** 2
    b_eff = np.maximum(vc.beta, floor_b)
    return design_mod.capped_design(space, VarianceComponents(a_eff, b_eff), gamma)
