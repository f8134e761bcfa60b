"""Sampling/experimentation designs and the efficiency bound they induce.

A design is a pair (p, pi) over a finite covariate space: p is the sampling
distribution and pi the probability that a sampled unit is actually
experimented on (otherwise only its prediction is kept).  Writing alpha for
the per-point predictable variance Var(E[Y|X,F] | X) and beta for the
unpredictable part E[Var(Y|X,F) | X], the minimal asymptotic variance of any
regular estimator of the population mean is

    V(p, pi) = sum_i (q_i^2 / p_i) * (beta_i / pi_i + alpha_i),

and a budget gamma constrains the expected experimentation share
sum_i p_i pi_i <= gamma.  ``optimal_design`` minimizes V subject to that
budget and pi <= 1; ``capped_design`` is the simpler normalize-then-cap rule
used inside the adaptive sampling loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import DesignError
from .population import CovariateSpace

VAR_FLOOR = 1e-8
_BUDGET_TOL = 1e-10
_SUM_TOL = 1e-10


@dataclass(frozen=True)
class VarianceComponents:
    """Per-point predictable (alpha) and unpredictable (beta) variance."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        b = np.asarray(self.beta, dtype=float)
        if a.ndim != 1 or a.shape != b.shape:
            raise ValueError("alpha and beta must be matching 1-d arrays")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("variance components must be finite")
        if np.any(a < 0) or np.any(b < 0):
            raise ValueError("variance components must be non-negative")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)


@dataclass(frozen=True)
class DesignRule:
    """A valid (p, pi) pair together with its experimentation budget."""

    p: np.ndarray
    pi: np.ndarray
    gamma: float
    notes: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        pi = np.asarray(self.pi, dtype=float)
        if p.ndim != 1 or p.shape != pi.shape:
            raise ValueError("p and pi must be matching 1-d arrays")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(pi))):
            raise DesignError("non-finite design entry")
        if np.any(p <= 0):
            raise DesignError("sampling weights must be strictly positive")
        if abs(float(p.sum()) - 1.0) > _SUM_TOL:
            raise DesignError("sampling weights must sum to 1")
        if np.any(pi <= 0) or np.any(pi > 1.0):
            raise DesignError("experimentation probabilities must lie in (0, 1]")
        if not (0.0 < self.gamma <= 1.0):
            raise DesignError("budget gamma must lie in (0, 1]")
        if float(p @ pi) > self.gamma + _BUDGET_TOL:
            raise DesignError("design exceeds the experimentation budget")
        p.setflags(write=False)
        pi.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "gamma", float(self.gamma))


def budget_usage(design: DesignRule) -> float:
    """Expected experimentation share of the design, sum_i p_i pi_i."""
    return float(design.p @ design.pi)


def variance_bound(space: CovariateSpace, design: DesignRule, vc: VarianceComponents) -> float:
    """Evaluate V(p, pi) on the discrete space."""
    q = space.q_weights
    if design.p.shape != q.shape or vc.alpha.shape != q.shape:
        raise ValueError("design/components not aligned with the space")
    if np.any(design.pi <= 0):
        raise DesignError("degenerate experimentation probability")
    return float(np.sum(q * q / design.p * (vc.beta / design.pi + vc.alpha)))


def _floored(vc: VarianceComponents):
    a = np.maximum(vc.alpha, VAR_FLOOR)
    b = np.maximum(vc.beta, VAR_FLOOR)
    floored = np.flatnonzero((vc.alpha < VAR_FLOOR) | (vc.beta < VAR_FLOOR))
    return a, b, floored


def pi_for_fixed_p(
    space: CovariateSpace, p: np.ndarray, beta: np.ndarray, gamma: float
) -> np.ndarray:
    """Budget-optimal experimentation probabilities for a pinned sampling rule.

    Minimizes sum_i (q_i^2 / p_i) beta_i / pi_i subject to
    sum_i p_i pi_i <= gamma and pi <= 1; the uncapped solution satisfies
    pi_i proportional to q_i sqrt(beta_i) / p_i, with budget freed by the cap
    redistributed exactly.
    """
    q = space.q_weights
    p = np.asarray(p, dtype=float)
    b = np.maximum(np.asarray(beta, dtype=float), VAR_FLOOR)
    if not (0.0 < gamma <= 1.0):
        raise DesignError("budget gamma must lie in (0, 1]")
    if gamma >= 1.0:
        return np.ones_like(p)
    z = q * np.sqrt(b) / p
    order = np.argsort(-z, kind="stable")
    zs = z[order]
    p_cum = np.concatenate([[0.0], np.cumsum(p[order])])
    s_total = float(np.sum(p * z))
    s_cum = np.concatenate([[0.0], np.cumsum((p * z)[order])])
    for k in range(p.size):
        remaining = gamma - p_cum[k]
        if remaining <= 0:
            break
        root = (s_total - s_cum[k]) / remaining  # sqrt of the dual variable
        cap_ok = k == 0 or zs[k - 1] >= root * (1 - 1e-12)
        unc_ok = zs[k] <= root * (1 + 1e-12)
        if cap_ok and unc_ok:
            return np.minimum(z / root, 1.0)
    raise DesignError("experimentation budget cannot be met")  # pragma: no cover


def _solve_with_caps(q, a, b, gamma):
    """Exact minimizer of V when the pi <= 1 constraint binds.

    Stationarity gives two regimes: uncapped points follow
    p ~ q sqrt(alpha), pi = sqrt(beta / (t alpha)) for a multiplier ratio t,
    while capped points (pi = 1) follow p ~ q sqrt(alpha + beta).  The cap
    set is exactly {beta/alpha > t}, so t is found by a 1-d root search on
    the budget identity, which is continuous and strictly decreasing in t.
    """
    r = b / a
    qa = q * np.sqrt(a)
    qb = q * np.sqrt(b)
    qab = q * np.sqrt(a + b)
    order = np.argsort(-r, kind="stable")
    rs = r[order]
    g_cum = np.concatenate([[0.0], np.cumsum(qab[order])])
    a_unc = qa.sum() - np.concatenate([[0.0], np.cumsum(qa[order])])
    b_unc = qb.sum() - np.concatenate([[0.0], np.cumsum(qb[order])])

    def h(k, t):
        return b_unc[k] / np.sqrt(t) + (1 - gamma) * g_cum[k] / np.sqrt(1 + t) - gamma * a_unc[k]

    m = q.size
    for k in range(1, m):
        t_hi, t_lo = rs[k - 1], rs[k]
        if t_hi <= t_lo:
            continue
        if h(k, t_hi) <= 0.0 <= h(k, t_lo):
            t_star = brentq(lambda t: h(k, t), t_lo, t_hi, xtol=1e-300, rtol=8.9e-16)
            capped = order[:k]
            unc = order[k:]
            u = 1.0 / (a_unc[k] + g_cum[k] / np.sqrt(1 + t_star))
            p = np.empty(m)
            pi = np.empty(m)
            p[unc] = u * qa[unc]
            p[capped] = (u / np.sqrt(1 + t_star)) * qab[capped]
            pi[unc] = np.minimum(np.sqrt(r[unc] / t_star), 1.0)
            pi[capped] = 1.0
            p /= p.sum()
            return p, pi
    raise DesignError("cap-set search failed")  # pragma: no cover


def optimal_design(space: CovariateSpace, vc: VarianceComponents, gamma: float) -> DesignRule:
    """Minimize the variance bound over designs meeting the budget exactly.

    Without binding caps this is the closed form p ~ q sqrt(alpha),
    pi = c sqrt(beta/alpha) with c chosen so the budget holds with equality.
    When some pi would exceed 1 the freed budget is re-spent exactly (see
    ``_solve_with_caps``); at gamma = 1 every point is experimented and the
    sampling rule collapses to p ~ q sqrt(alpha + beta).
    """
    q = space.q_weights
    if vc.alpha.shape != q.shape:
        raise ValueError("components not aligned with the space")
    if not (0.0 < gamma <= 1.0):
        raise DesignError("budget gamma must lie in (0, 1]")
    notes: list[str] = []
    if np.all(vc.alpha < VAR_FLOOR):
        # No predictable variance anywhere: sampling cannot help, keep p = q.
        a, b, floored = _floored(vc)
        pi = pi_for_fixed_p(space, q, b, gamma)
        notes.append("alpha_all_zero_fallback")
        if floored.size:
            notes.append("floored:" + ",".join(map(str, floored.tolist())))
        return DesignRule(q.copy(), pi, gamma, notes=tuple(notes))

    a, b, floored = _floored(vc)
    if floored.size:
        notes.append("floored:" + ",".join(map(str, floored.tolist())))
    s_a = float(q @ np.sqrt(a))
    s_b = float(q @ np.sqrt(b))
    pi_flat = gamma * s_a / s_b * np.sqrt(b / a)
    if np.max(pi_flat) <= 1.0:
        p = q * np.sqrt(a) / s_a
        return DesignRule(p, pi_flat, gamma, notes=tuple(notes))
    notes.append("cap_binding")
    if gamma >= 1.0:
        p = q * np.sqrt(a + b)
        return DesignRule(p / p.sum(), np.ones_like(p), gamma, notes=tuple(notes))
    p, pi = _solve_with_caps(q, a, b, gamma)
    return DesignRule(p, pi, gamma, notes=tuple(notes))


def capped_design(space: CovariateSpace, vc: VarianceComponents, gamma: float) -> DesignRule:
    """Normalize-then-cap design update used by the adaptive sampling loop.

    p is proportional to q sqrt(alpha), and pi is the budget-normalized
    experimentation ratio capped at one,

        pi(x) = min(gamma r(x) / E_p[r], 1),   r = sqrt(beta / alpha),

    which agrees with ``optimal_design`` whenever no cap binds.  Budget freed
    by the cap is not re-spent, so the realized budget can fall below gamma;
    ``optimal_design`` dominates this rule in V.
    """
    q = space.q_weights
    if not (0.0 < gamma <= 1.0):
        raise DesignError("budget gamma must lie in (0, 1]")
    notes: list[str] = ["capped_rule"]
    a = np.maximum(vc.alpha, VAR_FLOOR)
    b = np.maximum(vc.beta, VAR_FLOOR)
    if np.all(vc.alpha < VAR_FLOOR):
        p = q.copy()
        notes.append("alpha_all_zero_fallback")
    else:
        p = q * np.sqrt(a)
        p /= p.sum()
    ratio = np.sqrt(b / a)
    pi = np.minimum(gamma * ratio / float(p @ ratio), 1.0)
    return DesignRule(p, pi, gamma, notes=tuple(notes))


def optimal_bound_closed_form(space: CovariateSpace, vc: VarianceComponents, gamma: float) -> float:
    """Variance bound at the optimum: (1/gamma) E_q[sqrt(beta)]^2 + E_q[sqrt(alpha)]^2.

    The closed form is only exact when no experimentation probability is
    capped at 1; if a cap binds (or alpha vanishes identically) this falls
    back to evaluating the bound at the computed design.
    """
    design = optimal_design(space, vc, gamma)
    if "cap_binding" in design.notes or "alpha_all_zero_fallback" in design.notes:
        return variance_bound(space, design, vc)
    a, b, _ = _floored(vc)
    q = space.q_weights
    return float((q @ np.sqrt(b)) ** 2 / gamma + (q @ np.sqrt(a)) ** 2)


def design_rows(space: CovariateSpace, design: DesignRule):
    """Rows (point, q, p, pi) for CSV export."""
    for i in range(space.size):
        yield (float(space.points[i]), float(space.q_weights[i]),
               float(design.p[i]), float(design.pi[i]))
