"""Monte Carlo lab: synthetic shift scenarios and repeated-estimation studies.

Scenario naming: A has an exact predictor with heavy homoskedastic noise (no
possible efficiency gain for concept shift), B a good linear predictor, C a
poor predictor, D a poor predictor with a noiseless outcome (maximal
concept-shift gain), and E breaks the declared condition.  The concept-shift
family draws the population label independently of the features and hides
source outcomes; the covariate-shift family ties the label to the features
through a logistic mechanism and keeps outcomes everywhere.

Replicates use per-replicate substreams of a counter-based generator, so a
study is a pure function of its configuration and master seed, independent
of thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import combinations_with_replacement

import numpy as np

from .data import Dataset, LossSpec
from .engine import RiskEstimate, derive_seed, nonparametric_estimate
from .errors import ParameterError, ShiftRiskError
from .inference import specification_test
from .learners import FixedClassifier, FixedRegressor, LearnerSpec, SelectorSpec
from .special import covshift_estimate, plugin_gain, xconshift_estimate

SCENARIOS = ("A", "B", "C", "D", "E")
CONDITIONS = ("xconshift", "covshift")

FEATURES = ("x1", "x2", "x3", "pred")
LOSS = LossSpec("squared_error", outcome="y", prediction="pred")

# outcome noise scale per scenario
NOISE = {"A": 5.0, "B": 1.0, "C": 1.0, "D": 0.0, "E": 1.0}


@dataclass(frozen=True)
class ScenarioConfig:
    condition: str
    scenario: str
    n: int
    seed: int
    nuisance_mode: str = "consistent"

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ParameterError(f"unknown condition {self.condition!r}")
        if self.scenario not in SCENARIOS:
            raise ParameterError(f"unknown scenario {self.scenario!r}")
        if self.n < 1:
            raise ParameterError("n must be positive")
        if self.nuisance_mode not in ("consistent", "misspecified"):
            raise ParameterError(f"unknown nuisance mode {self.nuisance_mode!r}")

    def label(self) -> str:
        return f"{self.condition}-{self.scenario}-n{self.n}"


def oracle_mean(x: np.ndarray) -> np.ndarray:
    """Conditional outcome mean used by every scenario."""
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    return x1 + x2 + x3 + 0.4 * x1 * x3 - 0.5 * x2 * x3 + np.sin(x1 + x3)


def _alt_source_mean(x: np.ndarray) -> np.ndarray:
    """Source-population outcome mean for covariate-shift scenario E."""
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    return 1.0 + 0.5 * x1 - 1.5 * x2 + x1 * x3 - 1.3 * x2 * x3 ** 2


def predictor(scenario: str, x: np.ndarray) -> np.ndarray:
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    if scenario == "A":
        return oracle_mean(x)
    if scenario in ("B", "E"):
        return 1.4 * x1 + x2 + 1.4 * x3
    if scenario == "C":
        return -1.0 - 3.0 * x1 + 0.5 * x3
    return x1  # D


def source_probability(x: np.ndarray) -> np.ndarray:
    """P(A=1 | x) for the feature-dependent labelling mechanism (~90% source)."""
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    eta = np.cos(x1 + x2 * x3) + 2 * x1 ** 2 * x2 ** 2 + 3 * np.abs(x1 * x3) \
        + np.abs(x2) * (0.5 - x3)
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def gen_xconshift_scenario(cfg: ScenarioConfig) -> Dataset:
    """Concept-shift family: features independent of the label mechanism in
    scenarios A-D (10% target), dependent in E; source outcomes missing."""
    if cfg.condition != "xconshift":
        raise ParameterError("config is not a concept-shift scenario")
    rng = _rng(cfg.seed)
    x = rng.standard_normal((cfg.n, 3))
    if cfg.scenario == "E":
        a = (rng.random(cfg.n) < source_probability(x)).astype(int)
    else:
        a = (rng.random(cfg.n) < 0.9).astype(int)
    mu = oracle_mean(x)
    noise = NOISE[cfg.scenario]
    y = mu + noise * rng.standard_normal(cfg.n)
    y[a == 1] = np.nan
    return Dataset({"x1": x[:, 0], "x2": x[:, 1], "x3": x[:, 2],
                    "y": y, "pred": predictor(cfg.scenario, x)}, a)


def gen_covshift_scenario(cfg: ScenarioConfig) -> Dataset:
    """Covariate-shift family: the label always depends on the features; the
    outcome ignores the label in scenarios A-D and shifts its source-side
    conditional mean in E."""
    if cfg.condition != "covshift":
        raise ParameterError("config is not a covariate-shift scenario")
    rng = _rng(cfg.seed)
    x = rng.standard_normal((cfg.n, 3))
    a = (rng.random(cfg.n) < source_probability(x)).astype(int)
    mu = oracle_mean(x)
    if cfg.scenario == "E":
        mu = np.where(a == 0, mu, _alt_source_mean(x))
    y = mu + NOISE[cfg.scenario] * rng.standard_normal(cfg.n)
    return Dataset({"x1": x[:, 0], "x2": x[:, 1], "x3": x[:, 2],
                    "y": y, "pred": predictor(cfg.scenario, x)}, a)


def generate(cfg: ScenarioConfig) -> Dataset:
    if cfg.condition == "xconshift":
        return gen_xconshift_scenario(cfg)
    return gen_covshift_scenario(cfg)


def true_risk(cfg: ScenarioConfig, draws: int = 10 ** 6,
              seed: int = 2024) -> tuple[float, float]:
    """Target-population risk of the scenario predictor and its oracle SE.

    Exact where the squared prediction error is feature-free; otherwise a
    seeded Monte Carlo average of the noiseless gap over the (possibly
    tilted) target feature law, with the noise variance added back.
    """
    noise_var = NOISE[cfg.scenario] ** 2
    if cfg.scenario == "A":
        return noise_var, 0.0
    rng = _rng(seed)
    x = rng.standard_normal((draws, 3))
    gap2 = (oracle_mean(x) - predictor(cfg.scenario, x)) ** 2
    tilted = cfg.condition == "covshift" or cfg.scenario == "E"
    if not tilted:
        val = float(np.mean(gap2))
        se = float(np.std(gap2) / math.sqrt(draws))
    else:
        w = 1.0 - source_probability(x)
        val = float(np.sum(w * gap2) / np.sum(w))
        resid = w * (gap2 - val)
        se = float(np.std(resid) / math.sqrt(draws) / np.mean(w))
    return val + noise_var, se


# ---------------------------------------------------------------------------
# estimator registry
# ---------------------------------------------------------------------------

def model_basis_columns() -> tuple[str, ...]:
    """Names of the polynomial basis columns added by `add_model_basis`."""
    names = []
    for deg in range(2, 5):
        for combo in combinations_with_replacement(range(3), deg):
            names.append("p" + "".join(str(c + 1) for c in combo))
    return tuple(names)


POLY_COLS = model_basis_columns()
POLY_FEATURES = FEATURES + POLY_COLS


def add_model_basis(data: Dataset) -> Dataset:
    """Augment a scenario dataset with monomials of the features up to degree 4.

    The extra columns are deterministic functions of the features, so every
    declared shift condition is preserved; they give the linear learners a
    flexible function class comparable to the tree booster.
    """
    x = np.column_stack([data.column("x1"), data.column("x2"), data.column("x3")])
    cols = {}
    for deg in range(2, 5):
        for combo in combinations_with_replacement(range(3), deg):
            v = np.ones(data.n)
            for c in combo:
                v = v * x[:, c]
            cols["p" + "".join(str(c + 1) for c in combo)] = v
    return data.with_columns(**cols)


def consistent_regressor() -> SelectorSpec:
    """Holdout-selected conditional-risk learner.

    Candidates range from a nearly rigid linear fit to a polynomial ridge
    and a tree booster, so noiseless structured scenarios get a flexible
    fit while pure-noise scenarios fall back to a flat one."""
    return SelectorSpec((
        LearnerSpec("least_squares", features=FEATURES),
        LearnerSpec("ridge", penalty=1.0, features=POLY_FEATURES),
        LearnerSpec("ridge", penalty=10.0, features=POLY_FEATURES),
        LearnerSpec("boosted_stumps", rounds=300, learning_rate=0.1, max_depth=2,
                    features=FEATURES),
    ), splits=4)


def pooled_regressor() -> SelectorSpec:
    """Conditional-risk learner for the pooled covariate-shift fits."""
    return SelectorSpec((
        LearnerSpec("least_squares", features=FEATURES),
        LearnerSpec("ridge", penalty=1.0, features=POLY_FEATURES),
    ), splits=4)


def consistent_classifier() -> LearnerSpec:
    """Propensity learner: logistic over the polynomial basis, which tracks the
    nonlinear labelling mechanism closely."""
    return LearnerSpec("logistic", features=("x1", "x2", "x3") + POLY_COLS)


def misspecified_regressor(cfg: ScenarioConfig):
    """Deliberately inconsistent conditional-risk nuisance: a fixed wrong
    function for the sanity scenarios, a linear-only learner otherwise."""
    if cfg.scenario == "A":
        return FixedRegressor(lambda X: 10.0 + X[:, 0] ** 2)
    if cfg.scenario == "D":
        return FixedRegressor(lambda X: np.ones(X.shape[0]))
    return LearnerSpec("least_squares")


MISSPEC_G = FixedClassifier(lambda X: np.full(X.shape[0], 0.5))


def misspecified_conditional_risk():
    return FixedRegressor(lambda X: 1.0 + X[:, 0])


def build_estimator(name: str, cfg: ScenarioConfig, truth: float = math.nan):
    """Callable (data, V, seed, alpha) -> RiskEstimate for a registry name."""
    if name == "np":
        return lambda data, V, seed, alpha: nonparametric_estimate(data, LOSS, alpha=alpha)
    if name == "truth_oracle":
        def run_oracle(data, V, seed, alpha):
            influence = np.zeros(data.n)
            influence[0] = 1e-6
            from .engine import _finish_estimate
            return _finish_estimate(truth, influence, alpha=alpha, method="truth_oracle",
                                    data=data, loss_label=LOSS.label(),
                                    fold_sizes=(), fold_estimates=(), diagnostics={})
        return run_oracle
    if name == "xconshift":
        def run_xcon(data, V, seed, alpha):
            return xconshift_estimate(data, LOSS, consistent_regressor(), FEATURES,
                                      V=V, seed=seed, alpha=alpha)
        return run_xcon
    if name == "xconshift_mis":
        mis = misspecified_regressor(cfg)
        def run_xcon_mis(data, V, seed, alpha):
            if isinstance(mis, FixedRegressor):
                return xconshift_estimate(data, LOSS, None, FEATURES, V=V, seed=seed,
                                          alpha=alpha, fixed_e=mis)
            return xconshift_estimate(data, LOSS, mis, FEATURES, V=V, seed=seed,
                                      alpha=alpha)
        return run_xcon_mis
    if name == "covshift":
        def run_cov(data, V, seed, alpha):
            return covshift_estimate(data, LOSS, consistent_classifier(),
                                     pooled_regressor(), FEATURES,
                                     V=V, seed=seed, alpha=alpha)
        return run_cov
    if name == "covshift_mis_g":
        def run_cov_mg(data, V, seed, alpha):
            return covshift_estimate(data, LOSS, None, pooled_regressor(),
                                     FEATURES, V=V, seed=seed, alpha=alpha,
                                     fixed_g=MISSPEC_G.fn)
        return run_cov_mg
    if name == "covshift_mis_L":
        def run_cov_ml(data, V, seed, alpha):
            return covshift_estimate(data, LOSS, consistent_classifier(), None,
                                     FEATURES, V=V, seed=seed, alpha=alpha,
                                     fixed_l=misspecified_conditional_risk())
        return run_cov_ml
    raise ParameterError(f"unknown estimator {name!r}")


ESTIMATOR_NAMES = ("np", "xconshift", "xconshift_mis", "covshift",
                   "covshift_mis_g", "covshift_mis_L", "truth_oracle")


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsTable:
    configs: tuple[str, ...]
    truths: dict
    cells: dict        # (cfg label, estimator) -> metrics dict
    ratios: dict       # (cfg label, "est/np") -> variance ratio
    reps: int

    def to_dict(self) -> dict:
        return {
            "reps": self.reps,
            "configs": list(self.configs),
            "truths": {k: {"value": v[0], "oracle_se": v[1]}
                       for k, v in self.truths.items()},
            "cells": {f"{c}|{e}": m for (c, e), m in self.cells.items()},
            "variance_ratios": {f"{c}|{pair}": r for (c, pair), r in self.ratios.items()},
        }

    def to_text(self) -> str:
        header = ["config", "estimator", "bias", "sd", "n*mse", "coverage",
                  "mean_se", "reps", "excluded"]
        lines = ["  ".join(f"{h:>12}" for h in header)]
        for (c, e), m in sorted(self.cells.items()):
            row = [c, e, f"{m['bias']:.5f}", f"{m['sd']:.5f}",
                   f"{m['scaled_mse']:.4f}", f"{m['coverage']:.3f}",
                   f"{m['mean_se']:.5f}", str(m["reps_used"]), str(m["exclusions"])]
            lines.append("  ".join(f"{v:>12}" for v in row))
        for (c, pair), r in sorted(self.ratios.items()):
            lines.append(f"{c}: var({pair}) = {r:.4f}")
        return "\n".join(lines)


def _fsum_mean(values) -> float:
    return math.fsum(values) / len(values)


def _run_replicate(cfg, rep, estimator_names, V, master_seed, alpha,
                   with_test, with_gain, truth):
    ds_cfg = replace(cfg, seed=derive_seed(master_seed, "data", cfg.label(), rep))
    data = add_model_basis(generate(ds_cfg))
    records = {}
    np_est = None
    for name in estimator_names:
        try:
            est = build_estimator(name, cfg, truth)(data, V,
                                                    derive_seed(master_seed, "est", name, rep),
                                                    alpha)
        except ShiftRiskError as exc:
            records[name] = {"error": f"{type(exc).__name__}: {exc}"}
            continue
        rec = {"point": est.point, "se": est.se,
               "covered": bool(est.covers(truth)), "err": est.point - truth}
        if with_gain and est.method in ("xconshift", "yconshift", "covshift",
                                        "labelshift"):
            try:
                rec["gain"] = plugin_gain(est, data, LOSS)
            except ShiftRiskError:
                pass
        if name == "np":
            np_est = est
        elif with_test and np_est is not None:
            t = specification_test(est, np_est)
            rec["reject"] = bool(t.p_value < 0.05)
        records[name] = rec
    return records


def monte_carlo_run(configs, reps: int, estimator_names, V: int = 5,
                    master_seed: int = 1, alpha: float = 0.05,
                    threads: int | None = None, with_test: bool = False,
                    with_gain: bool = False, truth_draws: int = 10 ** 6,
                    dump_rows: list | None = None) -> MetricsTable:
    """Repeated-simulation study over one or more scenario configs.

    Per replicate a fresh dataset is generated from a derived substream and
    every estimator runs on it; estimator failures are excluded and counted.
    When `with_test` is set (and "np" is listed first), each efficient
    estimate is also tested against the nonparametric baseline at level 5%.
    """
    if reps < 1:
        raise ParameterError("reps must be >= 1")
    if isinstance(configs, ScenarioConfig):
        configs = [configs]
    estimator_names = list(estimator_names)
    cells = {}
    ratios = {}
    truths = {}
    for cfg in configs:
        label = cfg.label()
        truth, truth_se = true_risk(cfg, draws=truth_draws,
                                    seed=derive_seed(master_seed, "truth", label))
        truths[label] = (truth, truth_se)

        def task(rep, cfg=cfg, truth=truth):
            return _run_replicate(cfg, rep, estimator_names, V, master_seed,
                                  alpha, with_test, with_gain, truth)

        if threads is not None and threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(task, range(reps)))
        else:
            results = [task(rep) for rep in range(reps)]

        for name in estimator_names:
            recs = [r[name] for r in results]
            good = [r for r in recs if "error" not in r]
            excluded = len(recs) - len(good)
            if dump_rows is not None:
                for rep, r in enumerate(recs):
                    row = {"config": label, "rep": rep, "estimator": name}
                    row.update(r)
                    dump_rows.append(row)
            if not good:
                cells[(label, name)] = {"bias": math.nan, "sd": math.nan,
                                        "scaled_mse": math.nan, "coverage": math.nan,
                                        "mean_se": math.nan, "reps_used": 0,
                                        "exclusions": excluded}
                continue
            errs = [r["err"] for r in good]
            m = len(errs)
            bias = _fsum_mean(errs)
            var = math.fsum((e - bias) ** 2 for e in errs) / (m - 1) if m > 1 else 0.0
            mse = math.fsum(e * e for e in errs) / m
            cell = {
                "bias": bias,
                "sd": math.sqrt(var),
                "scaled_mse": cfg.n * mse,
                "coverage": _fsum_mean([1.0 if r["covered"] else 0.0 for r in good]),
                "mean_se": _fsum_mean([r["se"] for r in good]),
                "reps_used": m,
                "exclusions": excluded,
            }
            if with_test and any("reject" in r for r in good):
                cell["rejection_rate"] = _fsum_mean(
                    [1.0 if r.get("reject") else 0.0 for r in good if "reject" in r])
            if with_gain and any("gain" in r for r in good):
                cell["mean_plugin_gain"] = _fsum_mean(
                    [r["gain"] for r in good if "gain" in r])
            cells[(label, name)] = cell

        if "np" in estimator_names:
            for name in estimator_names:
                if name == "np":
                    continue
                pairs = [(r[name], r["np"]) for r in results
                         if "error" not in r[name] and "error" not in r["np"]]
                if len(pairs) > 2:
                    pts = np.array([p[0]["point"] for p in pairs])
                    nps = np.array([p[1]["point"] for p in pairs])
                    denom = float(np.var(nps, ddof=1))
                    if denom > 0:
                        ratios[(label, f"{name}/np")] = float(
                            np.var(pts, ddof=1) / denom)
    return MetricsTable(configs=tuple(c.label() for c in configs), truths=truths,
                        cells=cells, ratios=ratios, reps=reps)
