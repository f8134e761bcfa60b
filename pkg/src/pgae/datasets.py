"""Bundled synthetic census-like population and its generator.

The shipped CSV stands in for a real survey extract: strata are the cross
product of an age bucket and sex, five numeric features carry most of the
within-stratum signal, and the income outcome mixes stratum-level shifts,
feature effects, and stratum-dependent noise.  Regenerating with the same
seed reproduces the file byte for byte.
"""

from __future__ import annotations

import importlib.resources

import numpy as np

from .population import FinitePopulation, PopulationSchema, load_population
from .rng import stream

CENSUS_FILENAME = "census_synthetic.csv"
CENSUS_SEED = 220_417
CENSUS_ROWS = 22_104

CENSUS_SCHEMA = PopulationSchema(
    covariates=("age_bucket", "sex"),
    features=("edu_years", "hours_week", "tenure_years", "urban", "certifications"),
    outcome="income",
)

_AGE_BUCKETS = ("18-25", "26-35", "36-45", "46-55", "56-65", "66+")
_AGE_WEIGHTS = (0.14, 0.18, 0.17, 0.16, 0.15, 0.20)
_SEXES = ("F", "M")
_SEX_WEIGHTS = (0.51, 0.49)

_BASE_INCOME = (24000.0, 38000.0, 50000.0, 58000.0, 54000.0, 36000.0)
_SEX_SHIFT = 7000.0  # added for the second sex code
_COEF_EDU = 3400.0
_COEF_HOURS = 520.0
_COEF_TENURE = 520.0
_COEF_URBAN = 6000.0
_COEF_CERT = 2600.0
_TENURE_CAP = (4.0, 9.0, 14.0, 20.0, 25.0, 30.0)


def make_synthetic_census(n: int = CENSUS_ROWS, seed: int = CENSUS_SEED):
    """Generate the census-like rows; returns (header, list of row tuples)."""
    rng = stream(seed)
    age = rng.choice(len(_AGE_BUCKETS), size=n, p=_AGE_WEIGHTS)
    sex = rng.choice(2, size=n, p=_SEX_WEIGHTS)
    edu = np.clip(np.round(rng.normal(12.8 + 0.35 * age, 2.2)), 8, 21)
    hours = np.round(np.clip(rng.normal(38.0, 6.0, size=n), 5.0, 70.0), 1)
    tenure = np.round(rng.uniform(0.0, np.asarray(_TENURE_CAP)[age]), 1)
    urban = (rng.random(n) < 0.62).astype(float)
    certs = rng.binomial(5, 0.25, size=n).astype(float)
    sigma = 3200.0 + 450.0 * age + 900.0 * sex
    income = (
        np.asarray(_BASE_INCOME)[age]
        + _SEX_SHIFT * sex
        + _COEF_EDU * (edu - 12.0)
        + _COEF_HOURS * (hours - 38.0)
        + _COEF_TENURE * tenure
        + _COEF_URBAN * urban
        + _COEF_CERT * certs
        + sigma * rng.standard_normal(n)
    )
    income = np.round(income, 2)
    header = list(CENSUS_SCHEMA.covariates) + list(CENSUS_SCHEMA.features) + [
        CENSUS_SCHEMA.outcome
    ]
    rows = [
        (
            _AGE_BUCKETS[age[i]], _SEXES[sex[i]], repr(float(edu[i])),
            repr(float(hours[i])), repr(float(tenure[i])), repr(float(urban[i])),
            repr(float(certs[i])), repr(float(income[i])),
        )
        for i in range(n)
    ]
    return header, rows


def write_synthetic_census(path, n: int = CENSUS_ROWS, seed: int = CENSUS_SEED) -> None:
    header, rows = make_synthetic_census(n=n, seed=seed)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def bundled_census_path() -> str:
    """Filesystem path of the shipped census CSV."""
    return str(importlib.resources.files("pgae").joinpath("data", CENSUS_FILENAME))


def load_bundled_census() -> FinitePopulation:
    return load_population(bundled_census_path(), CENSUS_SCHEMA)
