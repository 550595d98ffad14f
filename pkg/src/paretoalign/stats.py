"""Alignment analysis: percent changes versus the worst group, logistic
regression by IRLS, Wald significance tests, and the four-hypothesis
harness linking offline metrics to simulated online outcomes.

The regression predictor is the fractional change of a group's offline
metric relative to the worst group (0.11 means +11%), attached to every
individual impression of that group; outcomes are per-impression binary
events. Fitting on all n observations rather than g aggregates is what
gives the Wald test its power at realistic group counts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .absim import ImpressionLog
from .metrics import FrontPoint


class StatsError(ValueError):
    pass


class SeparationError(StatsError):
    """Complete separation: the slope diverges and the MLE does not exist."""


@dataclass(frozen=True)
class HypothesisSpec:
    id: str
    predictor: str   # recall | od | product
    outcome: str     # clicked | ordered_given_clicked | units_per_impression
    expected_sign: int

    def __post_init__(self):
        if self.predictor not in ("recall", "od", "product"):
            raise StatsError(f"unknown predictor {self.predictor}")
        if self.outcome not in ("clicked", "ordered_given_clicked", "units_per_impression"):
            raise StatsError(f"unknown outcome {self.outcome}")
        if self.expected_sign not in (-1, 1):
            raise StatsError("expected_sign must be +1 or -1")


DEFAULT_HYPOTHESES = (
    HypothesisSpec("H1", "recall", "clicked", +1),
    HypothesisSpec("H2", "od", "ordered_given_clicked", +1),
    HypothesisSpec("H3", "product", "units_per_impression", +1),
    HypothesisSpec("H4", "recall", "ordered_given_clicked", -1),
)


@dataclass(frozen=True)
class RegressionResult:
    coef: float
    intercept: float
    se: float
    z: float
    p_value: float
    ci_low: float
    ci_high: float
    n: int
    converged: bool


@dataclass(frozen=True)
class HypothesisResult:
    spec: HypothesisSpec
    regression: RegressionResult
    significant: bool
    direction: int
    matches_expected_sign: bool


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def two_sided_p(z: float) -> float:
    return math.erfc(abs(z) / math.sqrt(2.0))


def percent_change(values) -> np.ndarray:
    """Fractional change of each value against the smallest one."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise StatsError("no values")
    baseline = v.min()
    if baseline <= 0:
        raise StatsError(f"nonpositive baseline {baseline}; percent change undefined")
    return v / baseline - 1.0


_MAX_ITER = 100
_TOL = 1e-10
_DIVERGE_NORM = 500.0


def _irls(x: np.ndarray, successes: np.ndarray, trials: np.ndarray) -> RegressionResult:
    """Intercept+slope logistic MLE on binomial rows via Newton/IRLS."""
    n_total = int(trials.sum())
    rate = successes.sum() / n_total
    rate = min(max(rate, 1e-12), 1 - 1e-12)
    beta = np.array([math.log(rate / (1 - rate)), 0.0])
    converged = False
    for _ in range(_MAX_ITER):
        eta = beta[0] + beta[1] * x
        p = 1.0 / (1.0 + np.exp(-eta))
        w = trials * p * (1.0 - p)
        resid = successes - trials * p
        grad = np.array([resid.sum(), (x * resid).sum()])
        sw = w.sum()
        swx = (w * x).sum()
        swxx = (w * x * x).sum()
        hess = np.array([[sw, swx], [swx, swxx]])
        det = sw * swxx - swx * swx
        if not np.isfinite(det) or det <= 0:
            raise SeparationError("separation: information matrix is singular")
        step = np.linalg.solve(hess, grad)
        beta = beta + step
        if not np.all(np.isfinite(beta)) or np.abs(beta).max() > _DIVERGE_NORM:
            raise SeparationError("separation: coefficients diverged")
        if np.abs(step).max() < _TOL:
            converged = True
            break
    eta = beta[0] + beta[1] * x
    p = 1.0 / (1.0 + np.exp(-eta))
    w = trials * p * (1.0 - p)
    sw, swx, swxx = w.sum(), (w * x).sum(), (w * x * x).sum()
    det = sw * swxx - swx * swx
    if det <= 0:
        raise SeparationError("separation: information matrix is singular at optimum")
    se = math.sqrt(sw / det)
    coef = float(beta[1])
    z = coef / se
    return RegressionResult(
        coef=coef,
        intercept=float(beta[0]),
        se=se,
        z=z,
        p_value=two_sided_p(z),
        ci_low=coef - 1.96 * se,
        ci_high=coef + 1.96 * se,
        n=n_total,
        converged=converged,
    )


def fit_logistic_counts(x, successes, trials) -> RegressionResult:
    """Logistic fit on aggregated binomial rows (x, successes, trials)."""
    x = np.asarray(x, dtype=np.float64)
    successes = np.asarray(successes, dtype=np.float64)
    trials = np.asarray(trials, dtype=np.float64)
    if np.any(successes > trials) or np.any(successes < 0):
        raise StatsError("successes must lie in [0, trials]")
    keep = trials > 0
    x, successes, trials = x[keep], successes[keep], trials[keep]
    if len(np.unique(x)) < 2:
        raise StatsError("predictor is constant; slope not identifiable")
    total_s = successes.sum()
    if total_s <= 0 or total_s >= trials.sum():
        raise StatsError("outcome contains a single class")
    return _irls(x, successes, trials)


def fit_logistic(x, y) -> RegressionResult:
    """Logistic fit on per-observation data: binary y against scalar x."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatsError("x and y must be equal-length vectors")
    if len(x) < 2:
        raise StatsError("need at least 2 observations")
    if not np.all((y == 0) | (y == 1)):
        raise StatsError("y must be binary")
    # identical-x observations carry the same likelihood term: aggregate
    ux, inverse = np.unique(x, return_inverse=True)
    successes = np.bincount(inverse, weights=y, minlength=len(ux))
    trials = np.bincount(inverse, minlength=len(ux)).astype(np.float64)
    return fit_logistic_counts(ux, successes, trials)


def wald_test(r: RegressionResult, alpha: float = 0.05) -> tuple[bool, int]:
    """(significant at alpha, sign of the coefficient)."""
    if not r.converged:
        raise StatsError("Wald test on a non-converged fit")
    direction = 1 if r.coef > 0 else (-1 if r.coef < 0 else 0)
    return r.p_value < alpha, direction


def _group_metric(front: list[FrontPoint], predictor: str) -> np.ndarray:
    attr = {"recall": "recall", "od": "od", "product": "product"}[predictor]
    return np.array([getattr(pt, attr) for pt in front], dtype=np.float64)


def _match_front_to_groups(front: list[FrontPoint], log: ImpressionLog) -> list[FrontPoint]:
    """Align front points with the log's groups by preference vector."""
    matched = []
    for g in range(log.group_prefs.shape[0]):
        if not np.any(log.groups == g):
            raise StatsError(f"group {g} absent from the impression log")
        pref = log.group_prefs[g]
        hits = [pt for pt in front
                if abs(pt.pi_click - pref[0]) < 1e-9 and abs(pt.pi_order - pref[1]) < 1e-9]
        if len(hits) != 1:
            raise StatsError(
                f"group {g} preference {pref.tolist()} matches {len(hits)} front points")
        matched.append(hits[0])
    return matched


def run_hypotheses(front: list[FrontPoint], log: ImpressionLog,
                   specs=DEFAULT_HYPOTHESES, alpha: float = 0.05) -> list[HypothesisResult]:
    """Fit one regression per hypothesis over all impressions.

    Every impression contributes one observation; for post-click outcomes
    only clicked impressions enter the fit.
    """
    matched = _match_front_to_groups(front, log)
    n_groups = len(matched)
    counts_n = np.array([int((log.groups == g).sum()) for g in range(n_groups)], dtype=np.float64)
    counts_clicked = np.array([int(log.clicked[log.groups == g].sum()) for g in range(n_groups)],
                              dtype=np.float64)
    counts_ordered = np.array([int(log.ordered[log.groups == g].sum()) for g in range(n_groups)],
                              dtype=np.float64)
    counts_units = np.array([int((log.units[log.groups == g] >= 1).sum()) for g in range(n_groups)],
                            dtype=np.float64)
    results = []
    for spec in specs:
        x = percent_change(_group_metric(matched, spec.predictor))
        if spec.outcome == "clicked":
            successes, trials = counts_clicked, counts_n
        elif spec.outcome == "ordered_given_clicked":
            successes, trials = counts_ordered, counts_clicked
        else:
            successes, trials = counts_units, counts_n
        reg = fit_logistic_counts(x, successes, trials)
        significant, direction = wald_test(reg, alpha)
        results.append(HypothesisResult(
            spec=spec,
            regression=reg,
            significant=significant,
            direction=direction,
            matches_expected_sign=significant and direction == spec.expected_sign,
        ))
    return results


# ---------------------------------------------------------------------------
# report output

REPORT_HEADER = ["hypothesis", "predictor", "outcome", "coef", "se", "z", "p_value",
                 "ci_low", "ci_high", "significant", "matches_expected_sign"]


def write_report(results: list[HypothesisResult], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for r in results:
            writer.writerow([
                r.spec.id, r.spec.predictor, r.spec.outcome,
                repr(r.regression.coef), repr(r.regression.se), repr(r.regression.z),
                repr(r.regression.p_value), repr(r.regression.ci_low),
                repr(r.regression.ci_high), int(r.significant),
                int(r.matches_expected_sign),
            ])


def format_p(p: float) -> str:
    return "p<1e-4" if p < 1e-4 else f"{p:.4f}"


def render_table(results: list[HypothesisResult]) -> str:
    """Aligned text table: one row per hypothesis with parameter, p, CI."""
    header = ("Hypothesis", "parameter", "p-value", "[0.025, 0.975]")
    rows = [header]
    for r in results:
        reg = r.regression
        rows.append((
            f"{r.spec.id}: {r.spec.predictor} vs. {r.spec.outcome}",
            f"{reg.coef:.4f}",
            format_p(reg.p_value),
            f"[{reg.ci_low:.3f}, {reg.ci_high:.3f}]",
        ))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = []
    for idx, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if idx == 0:
            lines.append("-" * (sum(widths) + 6))
    return "\n".join(lines) + "\n"


SCATTER_HEADER = ["hypothesis", "kind", "x", "y", "group", "n"]


def scatter_data(results: list[HypothesisResult], front: list[FrontPoint],
                 log: ImpressionLog, curve_samples: int = 50) -> list[list]:
    """Per-hypothesis plot data: one aggregated point per group plus the
    fitted probability curve sampled over the predictor range."""
    matched = _match_front_to_groups(front, log)
    n_groups = len(matched)
    rows: list[list] = []
    for r in results:
        x = percent_change(_group_metric(matched, r.spec.predictor))
        for g in range(n_groups):
            mask = log.groups == g
            if r.spec.outcome == "clicked":
                rate = log.clicked[mask].mean()
                n = int(mask.sum())
            elif r.spec.outcome == "ordered_given_clicked":
                clicks = log.clicked[mask].sum()
                rate = log.ordered[mask].sum() / clicks if clicks else float("nan")
                n = int(clicks)
            else:
                rate = (log.units[mask] >= 1).mean()
                n = int(mask.sum())
            rows.append([r.spec.id, "group", float(x[g]), float(rate), g, n])
        grid = np.linspace(x.min(), x.max(), curve_samples)
        reg = r.regression
        fitted = 1.0 / (1.0 + np.exp(-(reg.intercept + reg.coef * grid)))
        for gx, gy in zip(grid, fitted):
            rows.append([r.spec.id, "curve", float(gx), float(gy), "", ""])
    return rows


def write_scatter(rows: list[list], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCATTER_HEADER)
        for row in rows:
            writer.writerow([row[0], row[1], repr(row[2]), repr(row[3]), row[4], row[5]])
