"""Shift-condition specification testing, model comparison, and prediction-set
threshold calibration on top of completed risk estimates.

The specification test contrasts an efficient estimate with the
nonparametric target-only baseline: under the declared condition the scaled
gap is asymptotically standard normal with variance equal to the difference
of the two asymptotic variances, so a large standardized gap is evidence
that the efficient estimator is not root-n consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, LossSpec, make_folds
from .engine import RiskEstimate, crossfit_estimate_multi, nonparametric_estimate, \
    norm_cdf, norm_quantile
from .errors import ParameterError, SampleMismatchError
from .special import SpecialCondition, _conceptshift_multi, _weightshift_multi


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    se_gap: float            # SE_np^2 - SE_eff^2
    denominator_mode: str    # "se_gap" or "influence_difference"
    efficient_estimate: float
    baseline_estimate: float

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value,
                "se_gap": self.se_gap, "denominator_mode": self.denominator_mode,
                "efficient_estimate": self.efficient_estimate,
                "baseline_estimate": self.baseline_estimate}


@dataclass(frozen=True, eq=False)
class ComparisonResult:
    diff: float
    se: float
    alpha: float
    p_value: float
    estimate_1: float
    estimate_2: float
    influence_diff: np.ndarray

    @property
    def ci(self) -> tuple[float, float]:
        z = norm_quantile(1 - self.alpha / 2)
        return (self.diff - z * self.se, self.diff + z * self.se)

    def to_dict(self) -> dict:
        return {"diff": self.diff, "se": self.se, "ci": list(self.ci),
                "alpha": self.alpha, "p_value": self.p_value,
                "estimate_1": self.estimate_1, "estimate_2": self.estimate_2}


def _two_sided_p(statistic: float) -> float:
    return 2.0 * norm_cdf(-abs(statistic))


def specification_test(efficient: RiskEstimate, baseline: RiskEstimate) -> TestResult:
    """Standardized gap between an efficient estimate and the nonparametric one.

    The denominator is sqrt(SE_np^2 - SE_eff^2); when that gap is not
    positive (possible in finite samples), the variant denominator based on
    the per-row influence differences is used and flagged.
    """
    if baseline.method != "nonparametric":
        raise ParameterError("baseline must be the nonparametric estimate")
    if efficient.data_fingerprint != baseline.data_fingerprint \
            or efficient.n != baseline.n:
        raise SampleMismatchError("estimates were not computed on the same sample")
    if efficient.loss_label != baseline.loss_label:
        raise SampleMismatchError("estimates were not computed on the same loss")
    gap = baseline.se ** 2 - efficient.se ** 2
    delta = efficient.point - baseline.point
    if gap > 0:
        denom = math.sqrt(gap)
        mode = "se_gap"
    else:
        d = efficient.influence - baseline.influence
        sigma2 = float(np.mean(d * d))
        denom = math.sqrt(sigma2 / efficient.n)
        mode = "influence_difference"
    if denom == 0.0:
        statistic = 0.0
    else:
        statistic = delta / denom
    return TestResult(statistic=float(statistic), p_value=_two_sided_p(statistic),
                      se_gap=float(gap), denominator_mode=mode,
                      efficient_estimate=efficient.point,
                      baseline_estimate=baseline.point)


# ---------------------------------------------------------------------------
# model comparison
# ---------------------------------------------------------------------------

def _paired_estimates(data, loss1, loss2, method, *, condition=None, spec=None,
                      classifier=None, regressor=None, V=5, seed=0, alpha=0.05,
                      robust=True, pooled=True, mode="odds"):
    if method == "nonparametric":
        return (nonparametric_estimate(data, loss1, alpha=alpha),
                nonparametric_estimate(data, loss2, alpha=alpha))
    plan = make_folds(data.n, V, seed)
    if method == "seqcond":
        if spec is None:
            raise ParameterError("seqcond comparison needs a ShiftSpec")
        return tuple(crossfit_estimate_multi(
            data, spec, [loss1, loss2], classifier=classifier, regressor=regressor,
            fold_plan=plan, seed=seed, alpha=alpha, mode=mode))
    if condition is None:
        raise ParameterError(f"method {method!r} needs a SpecialCondition")
    if method in ("xconshift", "yconshift"):
        return tuple(_conceptshift_multi(
            data, [loss1, loss2], regressor, condition.nuisance_features(),
            V=V, seed=seed, alpha=alpha, robust=robust, fold_plan=plan,
            method=method))
    if method in ("covshift", "labelshift"):
        return tuple(_weightshift_multi(
            data, [loss1, loss2], classifier, regressor,
            condition.nuisance_features(), V=V, seed=seed, alpha=alpha,
            pooled=pooled, fold_plan=plan, method=method))
    raise ParameterError(f"unknown comparison method {method!r}")


def compare_models(data: Dataset, loss1: LossSpec, loss2: LossSpec,
                   method: str = "nonparametric", **kwargs) -> ComparisonResult:
    """Estimate the risk contrast of two losses on shared folds.

    Population-side nuisances (odds, marginals, propensities) are fit once
    and shared; only the loss-side regressions are refit, so the two
    estimates are positively coupled and the contrast is estimated from the
    per-row influence differences.
    """
    est1, est2 = _paired_estimates(data, loss1, loss2, method, **kwargs)
    alpha = kwargs.get("alpha", 0.05)
    diff = est1.point - est2.point
    d = est1.influence - est2.influence
    sigma2 = float(np.mean(d * d))
    se = math.sqrt(sigma2 / data.n)
    statistic = 0.0 if se == 0.0 else diff / se
    return ComparisonResult(diff=float(diff), se=se, alpha=alpha,
                            p_value=_two_sided_p(statistic),
                            estimate_1=est1.point, estimate_2=est2.point,
                            influence_diff=d)


# ---------------------------------------------------------------------------
# prediction-set threshold calibration
# ---------------------------------------------------------------------------

def calibrate_prediction_threshold(data: Dataset, score_col: str, alpha: float,
                                   method: str = "nonparametric",
                                   estimator=None) -> float:
    """Largest score threshold whose estimated miscoverage is at most alpha.

    Prediction sets keep scores at or above the threshold, so the
    miscoverage of threshold t is the target-population probability that the
    score falls below t.  The grid is the set of observed scores among the
    rows the chosen estimator consumes.  Returns -inf (the full set) when no
    threshold is feasible, and in the nonparametric case also when alpha is
    below 1/n_target so that no observed score may be excluded.
    """
    if not 0 < alpha < 1:
        raise ParameterError("alpha must lie in (0, 1)")
    scores = data.column(score_col)
    if method == "nonparametric":
        target = np.flatnonzero(data.pop == 0)
        if target.size == 0:
            raise ParameterError("no target rows to calibrate on")
        s = scores[target]
        if np.any(np.isnan(s)):
            raise ParameterError("scores must be defined on all target rows")
        n0 = s.size
        if alpha * n0 < 1:
            return -math.inf
        grid = np.unique(s)
        feasible = grid[np.array([np.count_nonzero(s < t) <= alpha * n0
                                  for t in grid])]
        return float(feasible.max()) if feasible.size else -math.inf
    if estimator is None:
        raise ParameterError("efficient calibration needs an estimator callable")
    if np.any(np.isnan(scores)):
        raise ParameterError("scores must be defined on all rows")
    grid = np.unique(scores)
    for t in grid[::-1]:
        ind = (scores < t).astype(float)
        ds_t = data.with_columns(__miscover__=ind)
        est = estimator(ds_t, LossSpec("column", column="__miscover__"))
        if est.point <= alpha:
            return float(t)
    return -math.inf
