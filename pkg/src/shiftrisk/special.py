"""Direct estimators for the four named two-population shift conditions.

Each estimator is the simplified form of the generic cross-fit machinery for
its condition: the concept-shift pair needs a single conditional-risk
regression, the covariate/label-shift pair needs a propensity plus a pooled
conditional-risk regression.  Given the same fold plan, learners and seeds,
each matches the generic engine run on the condition's component mapping.

The concept-shift estimators default to a variance based on the robust
influence function, which keeps confidence intervals valid even when the
conditional-risk nuisance is estimated inconsistently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, FoldPlan, LossSpec, ShiftSpec, evaluate_loss, make_folds
from .engine import RiskEstimate, _finish_estimate, derive_seed
from .errors import DegenerateFoldError, MissingValueError, ParameterError, \
    SpecValidationError, UndefinedGainError
from .learners import FixedClassifier, FixedRegressor, fit_classifier, \
    fit_regressor, odds_clip_count, odds_from_probability, predict

SPECIAL_KINDS = ("xconshift", "yconshift", "covshift", "labelshift")


@dataclass(frozen=True)
class SpecialCondition:
    """A named two-population condition over feature columns and one outcome column."""

    kind: str
    x_cols: tuple[str, ...]
    y_col: str

    def __post_init__(self):
        if self.kind not in SPECIAL_KINDS:
            raise ParameterError(f"unknown condition kind {self.kind!r}")
        object.__setattr__(self, "x_cols", tuple(self.x_cols))

    def to_shift_spec(self) -> ShiftSpec:
        """Component mapping of this condition for the generic engine."""
        x, y = self.x_cols, (self.y_col,)
        if self.kind == "xconshift":
            return ShiftSpec((x, y), (frozenset({0, 1}), frozenset({0})))
        if self.kind == "yconshift":
            return ShiftSpec((y, x), (frozenset({0, 1}), frozenset({0})))
        if self.kind == "covshift":
            return ShiftSpec((x, y), (frozenset({0}), frozenset({0, 1})))
        return ShiftSpec((y, x), (frozenset({0}), frozenset({0, 1})))

    def nuisance_features(self) -> tuple[str, ...]:
        """Columns the condition's nuisance fits condition on."""
        if self.kind in ("xconshift", "covshift"):
            return self.x_cols
        return (self.y_col,)


def _check_two_populations(data: Dataset):
    pops = set(data.populations())
    if pops != {0, 1}:
        raise SpecValidationError(
            f"named conditions expect populations {{0, 1}}; data has {sorted(pops)}")


def _loss_values(data, loss):
    vals = evaluate_loss(loss, data)
    target = np.flatnonzero(data.pop == 0)
    if target.size == 0:
        raise DegenerateFoldError("no target-population rows")
    if np.any(np.isnan(vals[target])):
        bad = target[np.isnan(vals[target])][0]
        raise MissingValueError(f"loss undefined on target row {int(bad)}")
    return vals


# ---------------------------------------------------------------------------
# concept shift (in features or labels)
# ---------------------------------------------------------------------------

def _conceptshift_multi(data, losses, regressor, features, *, V, seed, alpha,
                        robust, fold_plan, method, fixed=None):
    _check_two_populations(data)
    losses = list(losses)
    loss_values = [_loss_values(data, loss) for loss in losses]
    plan = fold_plan if fold_plan is not None else make_folds(data.n, V, seed)
    n = data.n
    is_target = data.pop == 0

    fold_sizes = []
    fold_estimates = [[] for _ in losses]
    influence = [np.zeros(n) for _ in losses]
    e_hat = [np.zeros(n) for _ in losses]
    fixed = fixed if isinstance(fixed, (list, tuple)) else [fixed] * len(losses)
    for v in range(plan.V):
        fold_rows = plan.fold_rows(v)
        out_rows = plan.out_rows(v)
        fold_sizes.append(fold_rows.size)
        fit_rows = out_rows[is_target[out_rows]]
        if fit_rows.size == 0:
            raise DegenerateFoldError(f"no out-of-fold target rows for fold {v}")
        n0 = int(np.count_nonzero(is_target[fold_rows]))
        if n0 == 0:
            raise DegenerateFoldError(f"fold {v} has no target rows")
        rho = n0 / fold_rows.size
        a = (~is_target[fold_rows]).astype(float)
        for j, lv in enumerate(loss_values):
            spec_j = fixed[j] if fixed[j] is not None else regressor
            model = fit_regressor(spec_j, data, lv, fit_rows, features=features,
                                  seed=derive_seed(seed, "E", v, j))
            e = predict(model, data, fold_rows)
            e_hat[j][fold_rows] = e
            contrib = e.copy()
            tmask = is_target[fold_rows]
            contrib[tmask] += (lv[fold_rows][tmask] - e[tmask]) / rho
            r_v = float(np.mean(contrib))
            fold_estimates[j].append(r_v)
            infl = contrib - r_v
            if robust:
                infl = infl + ((np.mean(e) - r_v) / rho) * (1.0 - a - rho)
            influence[j][fold_rows] = infl

    out = []
    sizes = np.asarray(fold_sizes, dtype=float)
    for j, loss in enumerate(losses):
        point = float(np.dot(sizes, np.asarray(fold_estimates[j])) / n)
        diag = {"rho_hat": float(np.count_nonzero(is_target) / n),
                "variance_mode": "robust" if robust else "plain",
                "_e_hat": e_hat[j]}
        out.append(_finish_estimate(point, influence[j], alpha=alpha,
                                    method=method, data=data,
                                    loss_label=loss.label(),
                                    fold_sizes=fold_sizes,
                                    fold_estimates=fold_estimates[j],
                                    diagnostics=diag))
    return out


def xconshift_estimate(data: Dataset, loss: LossSpec, regressor, x_cols, *,
                       V: int = 5, seed: int = 0, alpha: float = 0.05,
                       robust: bool = True, fold_plan: FoldPlan | None = None,
                       fixed_e=None) -> RiskEstimate:
    """Risk estimate when the feature distribution is shared across populations.

    The conditional risk given features is fit on out-of-fold target rows and
    used to augment the target-only loss average with the full-sample mean.
    `fixed_e` replaces the regression with a FixedRegressor (misspecified-
    nuisance experiments).
    """
    return _conceptshift_multi(data, [loss], regressor, tuple(x_cols), V=V,
                               seed=seed, alpha=alpha, robust=robust,
                               fold_plan=fold_plan, method="xconshift",
                               fixed=[fixed_e])[0]


def yconshift_estimate(data: Dataset, loss: LossSpec, regressor, y_col, *,
                       V: int = 5, seed: int = 0, alpha: float = 0.05,
                       robust: bool = True, fold_plan: FoldPlan | None = None,
                       fixed_e=None) -> RiskEstimate:
    """Mirror of `xconshift_estimate` when the outcome marginal is shared:
    the conditional risk is fit on the outcome instead of the features."""
    return _conceptshift_multi(data, [loss], regressor, (y_col,), V=V,
                               seed=seed, alpha=alpha, robust=robust,
                               fold_plan=fold_plan, method="yconshift",
                               fixed=[fixed_e])[0]


# ---------------------------------------------------------------------------
# covariate / label shift
# ---------------------------------------------------------------------------

def _weightshift_multi(data, losses, classifier, regressor, features, *,
                       V, seed, alpha, pooled, fold_plan, method,
                       fixed_g=None, fixed_l=None):
    _check_two_populations(data)
    losses = list(losses)
    loss_values = []
    for loss in losses:
        lv = evaluate_loss(loss, data)
        if np.any(np.isnan(lv)):
            bad = int(np.flatnonzero(np.isnan(lv))[0])
            raise MissingValueError(
                f"loss must be defined on every row under {method}; row {bad} is not")
        loss_values.append(lv)
    plan = fold_plan if fold_plan is not None else make_folds(data.n, V, seed)
    n = data.n
    is_target = data.pop == 0
    labels = (~is_target).astype(float)

    fold_sizes = []
    fold_estimates = [[] for _ in losses]
    influence = [np.zeros(n) for _ in losses]
    g_hat = np.zeros(n)
    l_hat = [np.zeros(n) for _ in losses]
    clip_count = 0
    fixed_l = fixed_l if isinstance(fixed_l, (list, tuple)) else [fixed_l] * len(losses)
    for v in range(plan.V):
        fold_rows = plan.fold_rows(v)
        out_rows = plan.out_rows(v)
        fold_sizes.append(fold_rows.size)
        n0 = int(np.count_nonzero(is_target[fold_rows]))
        if n0 == 0:
            raise DegenerateFoldError(f"fold {v} has no target rows")
        rho = n0 / fold_rows.size

        if fixed_g is not None:
            X = data.matrix(features, fold_rows)
            g = np.asarray(fixed_g(X), dtype=float)
        else:
            gmodel = fit_classifier(classifier, data, labels, out_rows,
                                    features=features,
                                    seed=derive_seed(seed, "g", v))
            p_src = predict(gmodel, data, fold_rows)
            clip_count += odds_clip_count(p_src)
            g = 1.0 / (1.0 + odds_from_probability(p_src))
        g_hat[fold_rows] = g

        lfit_rows = out_rows if pooled else out_rows[is_target[out_rows]]
        if lfit_rows.size == 0:
            raise DegenerateFoldError(f"no rows to fit the conditional risk for fold {v}")
        tmask = is_target[fold_rows]
        for j, lv in enumerate(loss_values):
            spec_j = fixed_l[j]
            if spec_j is not None:
                lmodel = fit_regressor(spec_j, data, lv, lfit_rows, features=features)
            else:
                lmodel = fit_regressor(regressor, data, lv, lfit_rows,
                                       features=features,
                                       seed=derive_seed(seed, "L", v, j))
            L = predict(lmodel, data, fold_rows)
            l_hat[j][fold_rows] = L
            contrib = (g * (lv[fold_rows] - L) + tmask * L) / rho
            r_v = float(np.mean(contrib))
            fold_estimates[j].append(r_v)
            influence[j][fold_rows] = contrib - (tmask / rho) * r_v

    out = []
    sizes = np.asarray(fold_sizes, dtype=float)
    for j, loss in enumerate(losses):
        point = float(np.dot(sizes, np.asarray(fold_estimates[j])) / n)
        diag = {"rho_hat": float(np.count_nonzero(is_target) / n),
                "propensity_clip_count": int(clip_count),
                "propensity_min": float(g_hat.min()),
                "propensity_max": float(g_hat.max()),
                "pooled_conditional_risk": pooled,
                "_g_hat": g_hat, "_l_hat": l_hat[j]}
        out.append(_finish_estimate(point, influence[j], alpha=alpha,
                                    method=method, data=data,
                                    loss_label=loss.label(),
                                    fold_sizes=fold_sizes,
                                    fold_estimates=fold_estimates[j],
                                    diagnostics=diag))
    return out


def covshift_estimate(data: Dataset, loss: LossSpec, classifier, regressor,
                      x_cols, *, V: int = 5, seed: int = 0, alpha: float = 0.05,
                      pooled: bool = True, fold_plan: FoldPlan | None = None,
                      fixed_g=None, fixed_l=None) -> RiskEstimate:
    """Risk estimate when the outcome law given features is shared.

    A target-membership propensity and a conditional risk given features are
    fit out-of-fold; the propensity passes through the same odds clipping as
    the generic engine, so weights stay bounded.  The conditional risk is fit
    on the pooled sample by default (valid under the condition), or on target
    rows only with `pooled=False`.  `fixed_g` supplies the propensity
    directly as a function of the feature matrix; `fixed_l` a FixedRegressor.
    """
    return _weightshift_multi(data, [loss], classifier, regressor, tuple(x_cols),
                              V=V, seed=seed, alpha=alpha, pooled=pooled,
                              fold_plan=fold_plan, method="covshift",
                              fixed_g=fixed_g, fixed_l=[fixed_l])[0]


def labelshift_estimate(data: Dataset, loss: LossSpec, classifier, regressor,
                        y_col, *, V: int = 5, seed: int = 0, alpha: float = 0.05,
                        pooled: bool = True, fold_plan: FoldPlan | None = None,
                        fixed_g=None, fixed_l=None) -> RiskEstimate:
    """Mirror of `covshift_estimate` when the feature law given the outcome is
    shared: both nuisances condition on the outcome column."""
    return _weightshift_multi(data, [loss], classifier, regressor, (y_col,),
                              V=V, seed=seed, alpha=alpha, pooled=pooled,
                              fold_plan=fold_plan, method="labelshift",
                              fixed_g=fixed_g, fixed_l=[fixed_l])[0]


def special_estimate(cond: SpecialCondition, data: Dataset, loss: LossSpec, *,
                     regressor=None, classifier=None, **kwargs) -> RiskEstimate:
    """Dispatch to the named-condition estimator for `cond.kind`."""
    if cond.kind == "xconshift":
        return xconshift_estimate(data, loss, regressor, cond.x_cols, **kwargs)
    if cond.kind == "yconshift":
        return yconshift_estimate(data, loss, regressor, cond.y_col, **kwargs)
    if cond.kind == "covshift":
        return covshift_estimate(data, loss, classifier, regressor, cond.x_cols,
                                 **kwargs)
    return labelshift_estimate(data, loss, classifier, regressor, cond.y_col,
                               **kwargs)


# ---------------------------------------------------------------------------
# analytic efficiency gains
# ---------------------------------------------------------------------------

def efficiency_gain(kind: str, *, rho: float | None = None,
                    within_var: float | None = None,
                    between_var: float | None = None,
                    weighted_within: float | None = None,
                    weighted_within_g: float | None = None,
                    weighted_between: float | None = None) -> float:
    """Closed-form relative efficiency gain 1 - var_eff / var_np.

    Concept-shift kinds take (`rho`, `within_var`, `between_var`): the target
    fraction, the conditional variance of the loss around its conditional
    mean in the target population, and the variance of the conditional mean
    around the risk.  Covariate/label-shift kinds take the propensity-
    weighted moments E[g(1-g) v], E[g v], and E[g (m - r)^2] with v the
    conditional loss variance and m the conditional mean.
    """
    if kind in ("xconshift", "yconshift"):
        if rho is None or within_var is None or between_var is None:
            raise ParameterError("concept-shift gain needs rho, within_var, between_var")
        denom = within_var + between_var
        if denom <= 0:
            raise UndefinedGainError("zero variance denominator")
        return (1.0 - rho) * between_var / denom
    if kind in ("covshift", "labelshift"):
        if weighted_within is None or weighted_within_g is None \
                or weighted_between is None:
            raise ParameterError("weight-shift gain needs the three weighted moments")
        denom = weighted_within_g + weighted_between
        if denom <= 0:
            raise UndefinedGainError("zero variance denominator")
        return weighted_within / denom
    raise ParameterError(f"unknown condition kind {kind!r}")


def plugin_gain(estimate: RiskEstimate, data: Dataset, loss: LossSpec) -> float:
    """Plug-in efficiency gain from the nuisance values of a completed run."""
    lv = evaluate_loss(loss, data)
    r = estimate.point
    is_target = data.pop == 0
    if estimate.method in ("xconshift", "yconshift"):
        e = estimate.diagnostics["_e_hat"]
        rho = float(np.count_nonzero(is_target) / data.n)
        within = float(np.mean((lv[is_target] - e[is_target]) ** 2))
        between = float(np.mean((e - r) ** 2))
        return efficiency_gain(estimate.method, rho=rho, within_var=within,
                               between_var=between)
    if estimate.method in ("covshift", "labelshift"):
        g = estimate.diagnostics["_g_hat"]
        L = estimate.diagnostics["_l_hat"]
        resid2 = (lv - L) ** 2
        return efficiency_gain(estimate.method,
                               weighted_within=float(np.mean(g * (1 - g) * resid2)),
                               weighted_within_g=float(np.mean(g * resid2)),
                               weighted_between=float(np.mean(g * (L - r) ** 2)))
    raise ParameterError(f"no plug-in gain for method {estimate.method!r}")
