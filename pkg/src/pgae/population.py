"""Covariate spaces, synthetic outcome models, predictors, and finite populations.

The covariate support is always finite here: either a quadrature grid that
discretizes a continuous density, or the discrete strata of a survey-style
population.  All downstream design and estimation code indexes nuisances and
designs by the points of a :class:`CovariateSpace`.
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, PredictorNotFittedError

GRID = "quadrature_grid"
STRATA = "discrete_strata"

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class CovariateSpace:
    """Finite weighted covariate support with known point masses ``q``.

    ``points`` are cell midpoints for a quadrature grid, or integer stratum
    codes for a discrete population.  ``q_weights`` are strictly positive and
    sum to one; they are treated as known throughout.
    """

    points: np.ndarray
    q_weights: np.ndarray
    kind: str = STRATA
    cell_width: float | None = None
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        q = np.asarray(self.q_weights, dtype=float)
        pts.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "q_weights", q)
        if self.kind not in (GRID, STRATA):
            raise ValueError(f"unknown space kind {self.kind!r}")
        if pts.ndim != 1 or q.shape != pts.shape or pts.size == 0:
            raise ValueError("points and q_weights must be matching 1-d arrays")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(q))):
            raise ValueError("non-finite point or weight")
        if np.any(q <= 0.0):
            raise ValueError("q_weights must be strictly positive")
        if abs(float(q.sum()) - 1.0) > _WEIGHT_TOL:
            raise ValueError("q_weights must sum to 1")
        if np.unique(pts).size != pts.size:
            raise ValueError("points must be distinct")
        if self.kind == GRID:
            w = self.cell_width
            if w is None or not np.isfinite(w) or w <= 0:
                raise ValueError("quadrature grid requires a positive cell_width")
            gaps = np.diff(np.sort(pts))
            if gaps.size and not np.allclose(gaps, w, rtol=1e-9, atol=1e-12):
                raise ValueError("grid points must be equally spaced by cell_width")
        if self.labels is not None and len(self.labels) != pts.size:
            raise ValueError("labels length must match points")

    @property
    def size(self) -> int:
        return self.points.size

    def locate(self, x) -> np.ndarray:
        """Map covariate values to point indices (grid cell or stratum code)."""
        x = np.asarray(x, dtype=float)
        if self.kind == GRID:
            lo = self.points[0] - 0.5 * self.cell_width
            idx = np.floor((x - lo) / self.cell_width).astype(np.int64)
            return np.clip(idx, 0, self.size - 1)
        idx = np.rint(x).astype(np.int64)
        if np.any((idx < 0) | (idx >= self.size)):
            raise DataError("covariate code outside the stratum range")
        return idx


def make_grid_space(lo: float, hi: float, m: int) -> CovariateSpace:
    """Uniform midpoint quadrature grid with ``m`` cells on [lo, hi]."""
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValueError("grid bounds must be finite")
    if not lo < hi:
        raise ValueError("require lo < hi")
    m = int(m)
    if m < 2:
        raise ValueError("require at least 2 grid cells")
    width = (hi - lo) / m
    points = lo + (np.arange(m) + 0.5) * width
    weights = np.full(m, 1.0 / m)
    return CovariateSpace(points, weights, kind=GRID, cell_width=width)


# ---------------------------------------------------------------------------
# Synthetic data-generating process
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticDgp:
    """Benchmark outcome model ``Y = 2W + X + XW + eps`` on X, W ~ U[-1, 1].

    The noise is centered Gaussian with conditional standard deviation
    ``noise_scale * |sin(noise_frequency * x)|``, so at the defaults the
    conditional noise variance is ``4 sin(3 pi x / 2)^2``.  The population
    mean of Y is exactly 0 by odd symmetry of every term.
    """

    noise_scale: float = 2.0
    noise_frequency: float = 1.5 * math.pi
    predictor_mode: str = "oracle_linear"

    def __post_init__(self):
        if self.predictor_mode not in ("oracle_linear", "refit_linear"):
            raise ValueError(f"unknown predictor_mode {self.predictor_mode!r}")
        if not (np.isfinite(self.noise_scale) and self.noise_scale >= 0):
            raise ValueError("noise_scale must be a finite non-negative real")

    def outcome_mean(self, x, w):
        return 2.0 * w + x + x * w

    def noise_sd(self, x):
        return self.noise_scale * np.abs(np.sin(self.noise_frequency * np.asarray(x, dtype=float)))

    def sample_w(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=n)

    def sample_many(self, x: np.ndarray, rng: np.random.Generator):
        """Draw (w, y) for each covariate value in ``x``."""
        x = np.asarray(x, dtype=float)
        if np.any(np.abs(x) > 1.0 + 1e-12):
            raise ValueError("covariate outside [-1, 1]")
        w = self.sample_w(rng, x.size)
        y = self.outcome_mean(x, w) + self.noise_sd(x) * rng.standard_normal(x.size)
        return w, y

    def true_mean(self) -> float:
        return 0.0


def dgp_sample(dgp: SyntheticDgp, x: float, rng: np.random.Generator):
    """Draw a single (w, y) pair at covariate value ``x``."""
    w, y = dgp.sample_many(np.asarray([float(x)]), rng)
    return float(w[0]), float(y[0])


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------


def _feature_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    return w


class Predictor:
    """Deterministic map from (covariate, side information) to a prediction."""

    kind = "abstract"

    def predict(self, x, w) -> np.ndarray:
        raise NotImplementedError

    def cache_token(self) -> str:
        return self.kind


class OraclePredictor(Predictor):
    """The fixed linear rule f(x, w) = 2w + x."""

    kind = "fixed_oracle"

    def predict(self, x, w):
        w = np.asarray(w, dtype=float)
        return 2.0 * w + np.asarray(x, dtype=float)


class ConstantPredictor(Predictor):
    """Warm-start predictor returning a constant (0 means 'no signal yet')."""

    kind = "constant"

    def __init__(self, value: float = 0.0):
        self.value = float(value)

    def predict(self, x, w):
        return np.full(np.asarray(x).shape, self.value, dtype=float)

    def cache_token(self) -> str:
        return f"constant:{self.value!r}"


class LeastSquaresPredictor(Predictor):
    """Linear regression of y on the side-information features and x.

    With ``x_mode='linear'`` the design is [1, w..., x]; note there is no
    interaction column, so the rule is deliberately misspecified for outcome
    models with an x*w term.  With ``x_mode='onehot'`` the covariate enters
    as stratum indicators instead.
    """

    kind = "least_squares"

    def __init__(self, x_mode: str = "linear", n_strata: int | None = None):
        if x_mode not in ("linear", "onehot"):
            raise ValueError(f"unknown x_mode {x_mode!r}")
        if x_mode == "onehot" and not n_strata:
            raise ValueError("onehot mode requires n_strata")
        self.x_mode = x_mode
        self.n_strata = n_strata
        self.coef: np.ndarray | None = None

    def _design(self, x, w) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        w = _feature_matrix(w)
        if self.x_mode == "linear":
            return np.column_stack([np.ones(x.size), w, x])
        onehot = np.zeros((x.size, self.n_strata))
        onehot[np.arange(x.size), x.astype(np.int64)] = 1.0
        return np.column_stack([w, onehot])

    def fit(self, x, w, y) -> "LeastSquaresPredictor":
        design = self._design(x, w)
        y = np.asarray(y, dtype=float)
        if y.size < design.shape[1]:
            raise ValueError("too few observations to fit the linear predictor")
        # Tiny ridge keeps the solve defined under collinear warm-up batches.
        gram = design.T @ design
        gram[np.diag_indices_from(gram)] += 1e-8
        self.coef = np.linalg.solve(gram, design.T @ y)
        return self

    def predict(self, x, w):
        if self.coef is None:
            raise PredictorNotFittedError("predictor not fitted")
        return self._design(np.atleast_1d(x), w) @ self.coef

    def cache_token(self) -> str:
        if self.coef is None:
            return "least_squares:unfit"
        return "least_squares:" + ",".join(repr(c) for c in self.coef)


class KnnPredictor(Predictor):
    """k-nearest-neighbour mean over standardized (x, w) feature space."""

    kind = "knn"

    def __init__(self, k: int = 25):
        self.k = int(k)
        self._tree = None
        self._y = None
        self._center = None
        self._scale = None

    def _standardize(self, x, w):
        pts = np.column_stack([np.asarray(x, dtype=float), _feature_matrix(w)])
        return (pts - self._center) / self._scale

    def fit(self, x, w, y) -> "KnnPredictor":
        pts = np.column_stack([np.asarray(x, dtype=float), _feature_matrix(w)])
        self._center = pts.mean(axis=0)
        self._scale = np.where(pts.std(axis=0) > 0, pts.std(axis=0), 1.0)
        self._tree = cKDTree((pts - self._center) / self._scale)
        self._y = np.asarray(y, dtype=float)
        return self

    def predict(self, x, w):
        if self._tree is None:
            raise PredictorNotFittedError("predictor not fitted")
        k = min(self.k, self._y.size)
        _, idx = self._tree.query(self._standardize(np.atleast_1d(x), w), k=k)
        return self._y[np.atleast_2d(idx)].mean(axis=1)


class BinnedMeanPredictor(Predictor):
    """Mean outcome over a (x-bin, first-feature-bin) grid with fallbacks."""

    kind = "binned_mean"

    def __init__(self, n_bins: int = 10):
        self.n_bins = int(n_bins)
        self._x_edges = None
        self._w_edges = None
        self._table = None
        self._global = None

    def _bins(self, x, w):
        x = np.asarray(x, dtype=float)
        w0 = _feature_matrix(w)[:, 0]
        bx = np.searchsorted(self._x_edges, x, side="right")
        bw = np.searchsorted(self._w_edges, w0, side="right")
        return bx * (self.n_bins) + bw

    def fit(self, x, w, y) -> "BinnedMeanPredictor":
        x = np.asarray(x, dtype=float)
        w0 = _feature_matrix(w)[:, 0]
        y = np.asarray(y, dtype=float)
        probs = np.linspace(0, 1, self.n_bins + 1)[1:-1]
        self._x_edges = np.unique(np.quantile(x, probs))
        self._w_edges = np.unique(np.quantile(w0, probs))
        n_cells = (self._x_edges.size + 1) * self.n_bins
        flat = self._bins(x, w)
        sums = np.bincount(flat, weights=y, minlength=n_cells)
        counts = np.bincount(flat, minlength=n_cells)
        self._global = float(y.mean())
        with np.errstate(invalid="ignore"):
            self._table = np.where(counts > 0, sums / np.maximum(counts, 1), self._global)
        return self

    def predict(self, x, w):
        if self._table is None:
            raise PredictorNotFittedError("predictor not fitted")
        flat = np.clip(self._bins(np.atleast_1d(x), w), 0, self._table.size - 1)
        return self._table[flat]


def dgp_predict(predictor: Predictor, x, w):
    """Evaluate a fitted predictor; scalar in, scalar out."""
    scalar = np.isscalar(x) or np.asarray(x).ndim == 0
    out = predictor.predict(
        np.atleast_1d(np.asarray(x, dtype=float)),
        np.atleast_1d(np.asarray(w, dtype=float)) if np.asarray(w).ndim <= 1 else w,
    )
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# Finite populations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PopulationSchema:
    """Column mapping for a population CSV: strata, features, outcome."""

    covariates: tuple[str, ...]
    features: tuple[str, ...]
    outcome: str

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "features", tuple(self.features))
        cols = list(self.covariates) + list(self.features) + [self.outcome]
        if len(set(cols)) != len(cols):
            raise ValueError("schema columns must be distinct")
        if not self.covariates:
            raise ValueError("at least one covariate column is required")


LABEL_SEP = "|"


@dataclass(frozen=True)
class FinitePopulation:
    """Units with discrete strata, numeric features, and a numeric outcome.

    The empirical stratum frequencies play the role of the known covariate
    distribution; the exact population mean is available for benchmarking.
    """

    stratum_of_unit: np.ndarray
    features: np.ndarray
    outcomes: np.ndarray
    stratum_labels: tuple[str, ...]
    schema: PopulationSchema
    counts: np.ndarray = field(init=False, repr=False)
    q_weights: np.ndarray = field(init=False, repr=False)
    _order: np.ndarray = field(init=False, repr=False)
    _offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        s = np.asarray(self.stratum_of_unit, dtype=np.int64)
        feats = np.asarray(self.features, dtype=float)
        y = np.asarray(self.outcomes, dtype=float)
        if feats.ndim != 2 or feats.shape[0] != s.size or y.shape != s.shape:
            raise ValueError("inconsistent unit array shapes")
        n_strata = len(self.stratum_labels)
        if s.size == 0:
            raise DataError("population has no units")
        if np.any((s < 0) | (s >= n_strata)):
            raise ValueError("stratum code out of range")
        if not np.all(np.isfinite(y)):
            raise DataError("non-finite outcome value")
        counts = np.bincount(s, minlength=n_strata)
        if np.any(counts == 0):
            raise DataError("empty stratum after parse")
        for arr, name in ((s, "stratum_of_unit"), (feats, "features"), (y, "outcomes")):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "q_weights", counts / counts.sum())
        order = np.argsort(s, kind="stable")
        object.__setattr__(self, "_order", order)
        object.__setattr__(self, "_offsets", np.concatenate([[0], np.cumsum(counts)]))

    @property
    def n_units(self) -> int:
        return self.outcomes.size

    @property
    def n_strata(self) -> int:
        return len(self.stratum_labels)

    def space(self) -> CovariateSpace:
        return CovariateSpace(
            points=np.arange(self.n_strata, dtype=float),
            q_weights=self.q_weights,
            kind=STRATA,
            labels=self.stratum_labels,
        )

    def true_mean(self) -> float:
        return float(self.outcomes.mean())

    def stratum_units(self, stratum: int) -> np.ndarray:
        lo, hi = self._offsets[stratum], self._offsets[stratum + 1]
        return self._order[lo:hi]

    def resolve_stratum(self, stratum) -> int:
        if isinstance(stratum, str):
            try:
                return self.stratum_labels.index(stratum)
            except ValueError:
                raise DataError(f"unknown stratum {stratum!r}") from None
        code = int(stratum)
        if not 0 <= code < self.n_strata:
            raise DataError(f"unknown stratum {stratum!r}")
        return code

    def draw_units(self, strata_codes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Vectorized bootstrap: one uniform with-replacement unit per code."""
        strata_codes = np.asarray(strata_codes, dtype=np.int64)
        within = rng.integers(0, self.counts[strata_codes])
        return self._order[self._offsets[strata_codes] + within]


def bootstrap_draw(pop: FinitePopulation, stratum, rng: np.random.Generator):
    """Uniform draw with replacement from one stratum; returns (features, y)."""
    code = pop.resolve_stratum(stratum)
    unit = int(pop.draw_units(np.asarray([code]), rng)[0])
    return pop.features[unit], float(pop.outcomes[unit])


def _fmt(v: float) -> str:
    return repr(float(v))


def load_population(path, schema: PopulationSchema) -> FinitePopulation:
    """Parse a UTF-8 CSV population; malformed cells fail with row numbers."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open population file: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("population file is empty") from None
        missing = [c for c in (*schema.covariates, *schema.features, schema.outcome) if c not in header]
        if missing:
            raise DataError(f"missing columns: {', '.join(missing)}")
        col = {name: header.index(name) for name in header}
        cov_idx = [col[c] for c in schema.covariates]
        feat_idx = [col[c] for c in schema.features]
        out_idx = col[schema.outcome]

        keys: list[tuple[str, ...]] = []
        feats: list[list[float]] = []
        ys: list[float] = []
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"row {rownum}: expected {len(header)} fields, got {len(row)}")
            raw_y = row[out_idx].strip()
            if not raw_y:
                raise DataError(f"row {rownum}: missing outcome {schema.outcome!r}")
            try:
                y = float(raw_y)
            except ValueError:
                raise DataError(
                    f"row {rownum}: non-numeric outcome {schema.outcome!r}={raw_y!r}"
                ) from None
            if not math.isfinite(y):
                raise DataError(f"row {rownum}: non-finite outcome {raw_y!r}")
            fvals = []
            for name, j in zip(schema.features, feat_idx):
                raw = row[j].strip()
                try:
                    fvals.append(float(raw))
                except ValueError:
                    raise DataError(f"row {rownum}: non-numeric feature {name!r}={raw!r}") from None
            key = tuple(row[j].strip() for j in cov_idx)
            if any(not part for part in key):
                raise DataError(f"row {rownum}: empty covariate cell")
            keys.append(key)
            feats.append(fvals)
            ys.append(y)
    if not ys:
        raise DataError("population file has no data rows")
    labels = sorted(set(keys))
    code_of = {k: i for i, k in enumerate(labels)}
    strata = np.fromiter((code_of[k] for k in keys), dtype=np.int64, count=len(keys))
    return FinitePopulation(
        stratum_of_unit=strata,
        features=np.asarray(feats, dtype=float),
        outcomes=np.asarray(ys, dtype=float),
        stratum_labels=tuple(LABEL_SEP.join(k) for k in labels),
        schema=schema,
    )


def save_population(pop: FinitePopulation, path) -> None:
    """Write the canonical CSV form (atomic replace, repr float formatting)."""
    schema = pop.schema
    header = list(schema.covariates) + list(schema.features) + [schema.outcome]
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(pop.n_units):
                parts = pop.stratum_labels[pop.stratum_of_unit[i]].split(LABEL_SEP)
                row = parts + [_fmt(v) for v in pop.features[i]] + [_fmt(pop.outcomes[i])]
                writer.writerow(row)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
