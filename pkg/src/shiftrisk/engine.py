"""Cross-fit risk estimation under a declared sequential-conditionals shift.

The estimator follows the estimating-equation recipe: per fold, conditional
odds of source-vs-target membership and a backward chain of conditional mean
losses are fit on out-of-fold data, a nuisance-weighted pseudo-loss is
evaluated in-fold, and the fold averages are combined.  Per-observation
influence values give the variance estimate, so every estimate ships with a
standard error and a normal confidence interval.

Two parametrizations of the population-side nuisances are supported: `odds`
(classifier-based conditional odds) and `ratio` (density-ratio functions,
either user-supplied or derived from the odds via the Bayes identity).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .data import Dataset, FoldPlan, LossSpec, ShiftSpec, evaluate_loss, \
    make_folds, validate_shift_spec
from .errors import DegenerateFoldError, MissingValueError, ParameterError
from .learners import FittedModel, FixedRegressor, fit_classifier, \
    fit_regressor, odds_clip_count, odds_from_probability, predict


def norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def norm_quantile(q: float) -> float:
    return float(ndtri(q))


def derive_seed(master: int, *parts) -> int:
    """Deterministic child seed from a master seed and context labels."""
    text = ":".join([str(master)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


# ---------------------------------------------------------------------------
# result container
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class RiskEstimate:
    """Point estimate with influence-based uncertainty and fold metadata."""

    point: float
    se: float
    alpha: float
    method: str
    n: int
    influence: np.ndarray
    fold_sizes: tuple[int, ...]
    fold_estimates: tuple[float, ...]
    diagnostics: dict
    data_fingerprint: str
    loss_label: str

    @property
    def ci(self) -> tuple[float, float]:
        z = norm_quantile(1 - self.alpha / 2)
        return (self.point - z * self.se, self.point + z * self.se)

    def covers(self, value: float) -> bool:
        lo, hi = self.ci
        return lo <= value <= hi

    def to_dict(self, include_influence: bool = True) -> dict:
        # diagnostics keys starting with "_" hold working arrays, not output
        diag = {k: v for k, v in self.diagnostics.items() if not k.startswith("_")}
        out = {
            "method": self.method,
            "estimate": self.point,
            "se": self.se,
            "ci": list(self.ci),
            "alpha": self.alpha,
            "n": self.n,
            "loss": self.loss_label,
            "folds": [{"v": v, "size": s, "r_v": r}
                      for v, (s, r) in enumerate(zip(self.fold_sizes,
                                                     self.fold_estimates))],
            "diagnostics": diag,
            "data_fingerprint": self.data_fingerprint,
        }
        if include_influence:
            out["influence"] = [float(x) for x in self.influence]
        return out


def _finish_estimate(point, influence, *, alpha, method, data, loss_label,
                     fold_sizes, fold_estimates, diagnostics) -> RiskEstimate:
    n = influence.size
    sigma2 = float(np.mean(influence * influence))
    se = math.sqrt(sigma2 / n)
    return RiskEstimate(point=float(point), se=se, alpha=alpha, method=method,
                        n=n, influence=influence,
                        fold_sizes=tuple(int(s) for s in fold_sizes),
                        fold_estimates=tuple(float(r) for r in fold_estimates),
                        diagnostics=diagnostics,
                        data_fingerprint=data.fingerprint(),
                        loss_label=loss_label)


# ---------------------------------------------------------------------------
# nuisance containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OddsFn:
    """Conditional odds of relevant-source vs target membership over a column prefix."""

    features: tuple[str, ...]
    classifier: FittedModel | None = None
    fixed: object = None  # callable over the feature matrix returning odds

    def values(self, data: Dataset, rows) -> np.ndarray:
        if self.fixed is not None:
            X = data.matrix(self.features, rows)
            return np.asarray(self.fixed(X), dtype=float)
        p = predict(self.classifier, data, rows)
        return odds_from_probability(p)

    def clip_count(self, data: Dataset, rows) -> int:
        if self.fixed is not None:
            return 0
        return odds_clip_count(predict(self.classifier, data, rows))


@dataclass(frozen=True, eq=False)
class RatioFn:
    """Density ratio of the target prefix law to the pooled relevant-source prefix law."""

    features: tuple[str, ...]
    fixed: object = None         # callable over the feature matrix
    odds: OddsFn | None = None   # derived via the Bayes identity when set
    pi_sum: float = 1.0          # sum of marginal probabilities over the level's sources
    pi0: float = 1.0

    def values(self, data: Dataset, rows) -> np.ndarray:
        if self.fixed is not None:
            X = data.matrix(self.features, rows)
            return np.asarray(self.fixed(X), dtype=float)
        theta = self.odds.values(data, rows)
        return self.pi_sum / (self.pi0 * (1.0 + theta))


@dataclass(eq=False)
class FoldNuisance:
    """Everything fit for one fold: marginals, odds/ratios, and the mean-loss chain."""

    pi: dict[int, float]
    theta0: float
    odds: tuple            # OddsFn per level k=2..K (index k-2); empty in ratio mode
    ratios: tuple          # RatioFn per level k=2..K (index k-2); empty in odds mode
    seq_models: tuple      # fitted mean-loss models for levels 1..K-1 (index k-1)
    seq_target_ranges: tuple  # (min, max) of each chain fit's training targets
    mode: str


def estimate_marginal_probs(data: Dataset, rows) -> dict[int, float]:
    """Empirical population frequencies within the given rows."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ParameterError("cannot estimate marginal probabilities on an empty fold")
    sub = data.pop[rows]
    return {int(a): float(np.count_nonzero(sub == a) / rows.size)
            for a in data.populations()}


def fit_conditional_odds(spec: ShiftSpec, k: int, data: Dataset, out_rows,
                         learner, seed: int = 0) -> OddsFn:
    """Fit the level-(k+1) odds: classify nonzero population labels within the
    level's relevant subsample on the first k component groups."""
    feats = spec.prefix_columns(k)
    sub = np.intersect1d(np.asarray(out_rows, dtype=np.int64),
                         data.rows_in(spec.sources[k]))
    if sub.size == 0:
        raise DegenerateFoldError(f"empty odds subsample at level {k + 1}")
    labels = (data.pop != 0).astype(float)
    model = fit_classifier(learner, data, labels, sub, features=feats, seed=seed)
    return OddsFn(feats, classifier=model)


def sequential_regression(spec: ShiftSpec, data: Dataset, out_rows, loss_values,
                          learner, seed: int = 0, overrides=None):
    """Backward chain of conditional mean-loss fits.

    Returns (models, target_ranges) with models[k-1] the level-k fit; the
    level-K values are the evaluated loss itself.  `overrides` may map a
    level k to a FixedRegressor.
    """
    K = spec.n_levels
    out_rows = np.asarray(out_rows, dtype=np.int64)
    overrides = overrides or {}
    models: list = [None] * (K - 1)
    ranges: list = [None] * (K - 1)
    prev_model = None
    for k in range(K - 1, 0, -1):
        sub = np.intersect1d(out_rows, data.rows_in(spec.sources[k]))
        if sub.size == 0:
            raise DegenerateFoldError(f"empty regression subsample at level {k + 1}")
        if prev_model is None:
            targets = np.asarray(loss_values, dtype=float)
        else:
            targets = np.full(data.n, np.nan)
            targets[sub] = predict(prev_model, data, sub)
        if np.any(np.isnan(targets[sub])):
            bad = sub[np.isnan(targets[sub])][0]
            raise MissingValueError(f"loss undefined at row {int(bad)} needed for the "
                                    f"level-{k} regression")
        fitter = overrides.get(k, learner)
        model = fit_regressor(fitter, data, targets, sub,
                              features=spec.prefix_columns(k),
                              seed=derive_seed(seed, "seq", k))
        models[k - 1] = model
        ranges[k - 1] = (float(np.min(targets[sub])), float(np.max(targets[sub])))
        prev_model = model
    return tuple(models), tuple(ranges)


def fit_fold_nuisances(data: Dataset, spec: ShiftSpec, out_rows, fold_rows,
                       loss_values, classifier, regressor, *, mode="odds",
                       pi_mode="in_fold", seed=0, odds_overrides=None,
                       seq_overrides=None, ratio_overrides=None) -> FoldNuisance:
    K = spec.n_levels
    odds_overrides = odds_overrides or {}
    ratio_overrides = ratio_overrides or {}
    pi = estimate_marginal_probs(data, fold_rows if pi_mode == "in_fold" else out_rows)
    pi0 = pi.get(0, 0.0)
    if spec.target_observed and pi0 == 0.0:
        raise DegenerateFoldError("fold carries no target-population rows")
    theta0 = sum(pi.get(a, 0.0) for a in spec.sources[0] if a != 0) / pi0 \
        if pi0 > 0 else math.inf

    odds: list = []
    ratios: list = []
    for k in range(1, K):  # builds the weight for level k+1
        feats = spec.prefix_columns(k)
        if mode == "odds":
            if k in odds_overrides:
                odds.append(OddsFn(feats, fixed=odds_overrides[k]))
            else:
                odds.append(fit_conditional_odds(spec, k, data, out_rows, classifier,
                                                 seed=derive_seed(seed, "odds", k)))
        else:
            if k in ratio_overrides:
                ratios.append(RatioFn(feats, fixed=ratio_overrides[k]))
            else:
                base = OddsFn(feats, fixed=odds_overrides[k]) if k in odds_overrides \
                    else fit_conditional_odds(spec, k, data, out_rows, classifier,
                                              seed=derive_seed(seed, "odds", k))
                pi_sum = sum(pi.get(a, 0.0) for a in spec.sources[k])
                ratios.append(RatioFn(feats, odds=base, pi_sum=pi_sum, pi0=pi0))

    seq_models, ranges = sequential_regression(
        spec, data, out_rows, loss_values, regressor, seed=seed,
        overrides=seq_overrides) if K > 1 else ((), ())
    return FoldNuisance(pi=pi, theta0=theta0, odds=tuple(odds), ratios=tuple(ratios),
                        seq_models=seq_models, seq_target_ranges=ranges, mode=mode)


# ---------------------------------------------------------------------------
# pseudo-loss and fold estimates
# ---------------------------------------------------------------------------

def pseudo_loss_values(nuis: FoldNuisance, spec: ShiftSpec, data: Dataset, rows,
                       loss_values, diagnostics: dict | None = None) -> np.ndarray:
    """Nuisance-weighted pseudo-loss of each requested row.

    Each level contributes only where the row's population belongs to that
    level's source set, so level values are evaluated solely on rows that
    consume them (this is what lets irrelevant columns be missing).
    """
    rows = np.asarray(rows, dtype=np.int64)
    K = spec.n_levels
    m = rows.size
    pops = data.pop[rows]
    ind = np.column_stack([np.isin(pops, sorted(spec.sources[k])) for k in range(K)])

    pi0 = nuis.pi.get(0, 0.0)
    if nuis.mode == "odds":
        if pi0 == 0.0:
            raise DegenerateFoldError("degenerate level weight: no target mass in fold")
        k1w = 1.0 / (pi0 * (1.0 + nuis.theta0))
    else:
        s1 = sum(nuis.pi.get(a, 0.0) for a in spec.sources[0])
        if s1 == 0.0:
            raise DegenerateFoldError("degenerate level weight: level-1 sources have no mass")
        k1w = 1.0 / s1

    # level values, evaluated only where consumed
    values = np.zeros((m, K))
    for k in range(1, K + 1):
        active = ind[:, k - 1].copy()
        if k < K:
            active |= ind[:, k]
        if not active.any():
            continue
        sel = rows[active]
        if k == K:
            vals = np.asarray(loss_values, dtype=float)[sel]
            if np.any(np.isnan(vals)):
                bad = sel[np.isnan(vals)][0]
                raise MissingValueError(f"loss undefined at consumed row {int(bad)}")
        else:
            vals = predict(nuis.seq_models[k - 1], data, sel)
        values[active, k - 1] = vals
        if diagnostics is not None and k < K:
            lo, hi = nuis.seq_target_ranges[k - 1]
            key = f"level_{k}"
            entry = diagnostics.setdefault("chain", {}).setdefault(
                key, {"train_range": [lo, hi], "eval_min": math.inf,
                      "eval_max": -math.inf, "outside_train_range": 0})
            entry["eval_min"] = min(entry["eval_min"], float(vals.min()))
            entry["eval_max"] = max(entry["eval_max"], float(vals.max()))
            entry["outside_train_range"] += int(np.count_nonzero((vals < lo) | (vals > hi)))

    total = ind[:, 0] * (k1w * values[:, 0])
    for k in range(2, K + 1):
        active = ind[:, k - 1]
        if not active.any():
            continue
        sel = rows[active]
        if nuis.mode == "odds":
            theta = nuis.odds[k - 2].values(data, sel)
            w = 1.0 / (pi0 * (1.0 + theta))
            if diagnostics is not None:
                finite = np.isfinite(theta)
                diagnostics["odds_inf_count"] = diagnostics.get("odds_inf_count", 0) \
                    + int(np.count_nonzero(~finite))
                if finite.any():
                    diagnostics["odds_min"] = min(diagnostics.get("odds_min", math.inf),
                                                  float(theta[finite].min()))
                    diagnostics["odds_max"] = max(diagnostics.get("odds_max", -math.inf),
                                                  float(theta[finite].max()))
                diagnostics["odds_clip_count"] = diagnostics.get("odds_clip_count", 0) \
                    + nuis.odds[k - 2].clip_count(data, sel)
        else:
            lam = nuis.ratios[k - 2].values(data, sel)
            pi_sum = sum(nuis.pi.get(a, 0.0) for a in spec.sources[k - 1])
            if pi_sum == 0.0:
                raise DegenerateFoldError(
                    f"degenerate level weight: level-{k} sources have no mass")
            w = lam / pi_sum
        contrib = np.zeros(m)
        contrib[active] = w * (values[active, k - 1] - values[active, k - 2])
        total = total + contrib
    return total


def pseudo_loss(nuis: FoldNuisance, spec: ShiftSpec, data: Dataset, row: int,
                loss_values) -> float:
    """Single-row pseudo-loss (vectorised form above is what estimators use)."""
    return float(pseudo_loss_values(nuis, spec, data, np.array([row]), loss_values)[0])


def foldwise_estimate(nuis: FoldNuisance, spec: ShiftSpec, data: Dataset,
                      fold_rows, loss_values) -> float:
    """In-fold average of the pseudo-loss."""
    t = pseudo_loss_values(nuis, spec, data, fold_rows, loss_values)
    return float(np.mean(t))


def influence_values(nuis: FoldNuisance, spec: ShiftSpec, data: Dataset,
                     fold_rows, loss_values, r_v: float,
                     pseudo: np.ndarray | None = None) -> np.ndarray:
    """Estimating-function values at the fold estimate for each in-fold row."""
    fold_rows = np.asarray(fold_rows, dtype=np.int64)
    if pseudo is None:
        pseudo = pseudo_loss_values(nuis, spec, data, fold_rows, loss_values)
    pops = data.pop[fold_rows]
    ind1 = np.isin(pops, sorted(spec.sources[0]))
    pi0 = nuis.pi.get(0, 0.0)
    if nuis.mode == "odds":
        k1w = 1.0 / (pi0 * (1.0 + nuis.theta0))
    else:
        k1w = 1.0 / sum(nuis.pi.get(a, 0.0) for a in spec.sources[0])
    return pseudo - ind1 * (k1w * r_v)


def influence_and_variance(influence: np.ndarray) -> tuple[float, float]:
    """(asymptotic-variance estimate, standard error) from influence values."""
    n = influence.size
    sigma2 = float(np.mean(influence * influence))
    return sigma2, math.sqrt(sigma2 / n)


# ---------------------------------------------------------------------------
# cross-fit estimators
# ---------------------------------------------------------------------------

def crossfit_estimate_multi(data: Dataset, spec: ShiftSpec, losses, *,
                            classifier=None, regressor=None, V: int = 5,
                            seed: int = 0, mode: str = "odds",
                            pi_mode: str = "in_fold", alpha: float = 0.05,
                            odds_overrides=None, seq_overrides=None,
                            ratio_overrides=None, fold_plan: FoldPlan | None = None,
                            validate: bool = True) -> list[RiskEstimate]:
    """Run the cross-fit estimator for several losses on shared folds.

    Population-side nuisances (odds/ratios and marginals) are fit once per
    fold and shared across losses; only the mean-loss chain is refit per
    loss.  `seq_overrides` may be a single mapping or one mapping per loss.
    """
    if mode not in ("odds", "ratio"):
        raise ParameterError(f"unknown nuisance mode {mode!r}")
    if mode == "odds" and not spec.target_observed:
        raise ParameterError("the odds parametrization requires observed target data; "
                             "use ratio mode with supplied ratio functions")
    if pi_mode not in ("in_fold", "out_of_fold"):
        raise ParameterError(f"unknown marginal-probability mode {pi_mode!r}")
    losses = list(losses)
    loss_values = []
    for loss in losses:
        if validate:
            validate_shift_spec(spec, data, loss)
        loss_values.append(evaluate_loss(loss, data))
    plan = fold_plan if fold_plan is not None else make_folds(data.n, V, seed)

    per_loss_overrides = seq_overrides if isinstance(seq_overrides, (list, tuple)) \
        else [seq_overrides] * len(losses)

    n = data.n
    fold_sizes = []
    fold_estimates = [[] for _ in losses]
    influence = [np.zeros(n) for _ in losses]
    diagnostics = [{} for _ in losses]
    for v in range(plan.V):
        fold_rows = plan.fold_rows(v)
        out_rows = plan.out_rows(v)
        fold_sizes.append(fold_rows.size)
        shared = None
        for j, loss in enumerate(losses):
            if shared is None:
                nuis = fit_fold_nuisances(
                    data, spec, out_rows, fold_rows, loss_values[j],
                    classifier, regressor, mode=mode, pi_mode=pi_mode,
                    seed=derive_seed(seed, "fold", v),
                    odds_overrides=odds_overrides,
                    seq_overrides=per_loss_overrides[j],
                    ratio_overrides=ratio_overrides)
                shared = nuis
            else:
                nuis = _reuse_population_side(shared, data, spec, out_rows,
                                              loss_values[j], regressor,
                                              derive_seed(seed, "fold", v),
                                              per_loss_overrides[j])
            pseudo = pseudo_loss_values(nuis, spec, data, fold_rows, loss_values[j],
                                        diagnostics=diagnostics[j])
            r_v = float(np.mean(pseudo))
            fold_estimates[j].append(r_v)
            influence[j][fold_rows] = influence_values(
                nuis, spec, data, fold_rows, loss_values[j], r_v, pseudo=pseudo)

    out = []
    sizes = np.asarray(fold_sizes, dtype=float)
    for j, loss in enumerate(losses):
        point = float(np.dot(sizes, np.asarray(fold_estimates[j])) / n)
        method = f"seqcond_{mode}"
        out.append(_finish_estimate(point, influence[j], alpha=alpha, method=method,
                                    data=data, loss_label=loss.label(),
                                    fold_sizes=fold_sizes,
                                    fold_estimates=fold_estimates[j],
                                    diagnostics=diagnostics[j]))
    return out


def _reuse_population_side(shared: FoldNuisance, data, spec, out_rows, loss_values,
                           regressor, seed, seq_overrides) -> FoldNuisance:
    seq_models, ranges = sequential_regression(
        spec, data, out_rows, loss_values, regressor, seed=seed,
        overrides=seq_overrides) if spec.n_levels > 1 else ((), ())
    return FoldNuisance(pi=shared.pi, theta0=shared.theta0, odds=shared.odds,
                        ratios=shared.ratios, seq_models=seq_models,
                        seq_target_ranges=ranges, mode=shared.mode)


def crossfit_estimate(data: Dataset, spec: ShiftSpec, loss: LossSpec,
                      **kwargs) -> RiskEstimate:
    """Cross-fit risk estimate under the declared shift condition (single loss)."""
    return crossfit_estimate_multi(data, spec, [loss], **kwargs)[0]


def nonparametric_estimate(data: Dataset, loss: LossSpec,
                           alpha: float = 0.05) -> RiskEstimate:
    """Sample mean of the loss over target-population rows, with its influence SE."""
    loss_values = evaluate_loss(loss, data)
    target = np.flatnonzero(data.pop == 0)
    if target.size == 0:
        raise DegenerateFoldError("no target-population rows")
    vals = loss_values[target]
    if np.any(np.isnan(vals)):
        bad = target[np.isnan(vals)][0]
        raise MissingValueError(f"loss undefined on target row {int(bad)}")
    point = float(np.mean(vals))
    rho = target.size / data.n
    influence = np.zeros(data.n)
    influence[target] = (vals - point) / rho
    return _finish_estimate(point, influence, alpha=alpha, method="nonparametric",
                            data=data, loss_label=loss.label(),
                            fold_sizes=(), fold_estimates=(),
                            diagnostics={"rho_hat": rho})
