"""Regression and classification primitives for nuisance fitting.

Everything here is deliberately small and deterministic: exact linear
algebra for least squares / ridge / logistic, and the numba-backed kernels
for kNN and gradient-boosted trees.  A fitted model is a frozen value whose
`predict` is a pure function of (model, feature row), so models can be
shared freely across concurrently processed folds.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import DomainError, ParameterError

LEARNER_KINDS = ("least_squares", "ridge", "logistic", "knn", "boosted_stumps")

ODDS_CLIP = 1e-3


@dataclass(frozen=True)
class LearnerSpec:
    """Configuration of one learner.

    Only the parameters relevant to `kind` are read: `penalty` for ridge,
    `k` for knn, and (`rounds`, `learning_rate`, `max_depth`) for
    boosted_stumps.  `features` may be left unset when the caller supplies
    feature columns at fit time (estimators do this per level).
    """

    kind: str
    penalty: float = 1.0
    k: int = 5
    rounds: int = 200
    learning_rate: float = 0.1
    max_depth: int = 1
    features: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ParameterError(f"unknown learner kind {self.kind!r}")
        if self.penalty < 0:
            raise ParameterError("ridge penalty must be >= 0")
        if self.k < 1:
            raise ParameterError("knn neighbour count must be >= 1")
        if self.rounds < 1:
            raise ParameterError("boosting rounds must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ParameterError("learning_rate must be in (0, 1]")
        if self.max_depth < 1:
            raise ParameterError("max_depth must be >= 1")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "ridge":
            d["penalty"] = self.penalty
        elif self.kind == "knn":
            d["k"] = self.k
        elif self.kind == "boosted_stumps":
            d.update(rounds=self.rounds, learning_rate=self.learning_rate,
                     max_depth=self.max_depth)
        if self.features is not None:
            d["features"] = list(self.features)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerSpec":
        d = dict(d)
        if "features" in d and d["features"] is not None:
            d["features"] = tuple(d["features"])
        return cls(**d)


@dataclass(frozen=True)
class SelectorSpec:
    """Fixed-grid holdout selection over candidate learners.

    Each candidate is fit on a deterministic training split of the fit rows
    and scored by squared error on the held-out part; the winner is refit on
    all fit rows.  With `splits > 1` the score is averaged over that many
    disjoint holdouts (rotating fifths of a fixed permutation), which makes
    the choice far more stable on noisy targets.  Ties keep the earlier
    candidate, so list candidates simplest first.
    """

    candidates: tuple[LearnerSpec, ...]
    holdout: float = 0.25
    splits: int = 1
    features: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.candidates:
            raise ParameterError("selector needs at least one candidate")
        if not 0 < self.holdout < 1:
            raise ParameterError("holdout fraction must be in (0, 1)")
        if self.splits < 1:
            raise ParameterError("splits must be >= 1")


@dataclass(frozen=True)
class FixedRegressor:
    """User-supplied regression function of the feature matrix (rows x features)."""

    fn: Callable[[np.ndarray], np.ndarray]
    features: tuple[str, ...] = ()


@dataclass(frozen=True)
class FixedClassifier:
    """User-supplied probability function; values must land in [0, 1]."""

    fn: Callable[[np.ndarray], np.ndarray]
    features: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class FittedModel:
    kind: str
    features: tuple[str, ...]
    fit_rows: np.ndarray
    params: dict
    is_classifier: bool = False

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        out = _PREDICTORS[self.kind](self.params, np.asarray(X, dtype=float))
        out = np.asarray(out, dtype=float)
        if self.is_classifier:
            out = np.clip(out, 0.0, 1.0)
        return out


# ---------------------------------------------------------------------------
# fitting internals
# ---------------------------------------------------------------------------

def _design(X):
    return np.hstack([np.ones((X.shape[0], 1)), X])


def _fit_least_squares(X, y, spec):
    beta, *_ = np.linalg.lstsq(_design(X), y, rcond=None)
    return {"beta": beta}


def _fit_ridge(X, y, spec):
    """Ridge on internally standardized features; intercept unpenalised.

    Standardizing makes one penalty scale work across feature magnitudes;
    the returned coefficients are mapped back to the raw scale."""
    if spec.penalty == 0:
        return _fit_least_squares(X, y, spec)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (X - mu) / sd
    D = np.hstack([np.ones((X.shape[0], 1)), Z])
    p = D.shape[1]
    pen = spec.penalty * np.eye(p)
    pen[0, 0] = 0.0
    beta_z = np.linalg.solve(D.T @ D + pen, D.T @ y)
    beta = np.empty(p)
    beta[1:] = beta_z[1:] / sd
    beta[0] = beta_z[0] - float(mu @ beta[1:])
    return {"beta": beta}


def _fit_logistic(X, y, spec, max_iter=50, tol=1e-10):
    D = _design(X)
    p = D.shape[1]
    beta = np.zeros(p)
    for _ in range(max_iter):
        eta = D @ beta
        mu = _expit(eta)
        w = np.clip(mu * (1 - mu), 1e-10, None)
        H = D.T @ (D * w[:, None]) + 1e-8 * np.eye(p)
        g = D.T @ (y - mu)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    return {"beta": beta}


def _expit(t):
    out = np.empty_like(t, dtype=float)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _fit_knn(X, y, spec):
    return {"X": X.copy(), "y": np.asarray(y, dtype=float).copy(),
            "k": min(spec.k, X.shape[0])}


def _fit_boost(X, y, spec):
    base, feat, thr, val = kernels.fit_boost(
        np.ascontiguousarray(X, dtype=float), np.asarray(y, dtype=float),
        spec.rounds, spec.learning_rate, spec.max_depth, kernels.MIN_LEAF)
    return {"base": base, "feat": feat, "thr": thr, "val": val,
            "lr": spec.learning_rate, "max_depth": spec.max_depth,
            "lo": float(np.min(y)), "hi": float(np.max(y))}


_FITTERS = {
    "least_squares": _fit_least_squares,
    "ridge": _fit_ridge,
    "logistic": _fit_logistic,
    "knn": _fit_knn,
    "boosted_stumps": _fit_boost,
}


def _predict_linear(params, X):
    return _design(X) @ params["beta"]


def _predict_logistic(params, X):
    return _expit(_design(X) @ params["beta"])


def _predict_knn(params, X):
    d = kernels.sq_dists(np.ascontiguousarray(X, dtype=float), params["X"])
    order = np.argsort(d, axis=1, kind="stable")[:, : params["k"]]
    return params["y"][order].mean(axis=1)


def _predict_boost(params, X):
    out = kernels.predict_boost(
        params["base"], params["feat"], params["thr"], params["val"],
        params["lr"], np.ascontiguousarray(X, dtype=float), params["max_depth"])
    return np.clip(out, params["lo"], params["hi"])


def _predict_constant(params, X):
    return np.full(X.shape[0], params["value"])


def _predict_fixed(params, X):
    return np.asarray(params["fn"](X), dtype=float)


_PREDICTORS = {
    "least_squares": _predict_linear,
    "ridge": _predict_linear,
    "logistic": _predict_logistic,
    "knn": _predict_knn,
    "boosted_stumps": _predict_boost,
    "constant": _predict_constant,
    "fixed": _predict_fixed,
}


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def _resolve_rows(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ParameterError("cannot fit a learner on an empty row set")
    return rows


def _holdout_splits(rows: np.ndarray, frac: float, splits: int, seed: int):
    """Deterministic (train, holdout) pairs: rotating slices of one permutation."""
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    perm = rng.permutation(rows.size)
    n_hold = max(1, int(round(frac * rows.size)))
    n_hold = min(n_hold, rows.size - 1)
    out = []
    for s in range(splits):
        start = (s * n_hold) % rows.size
        take = np.arange(start, start + n_hold) % rows.size
        hold_mask = np.zeros(rows.size, dtype=bool)
        hold_mask[perm[take]] = True
        out.append((rows[~hold_mask], rows[hold_mask]))
    return out


def _select(spec: SelectorSpec, data, values, rows, seed, fit_one):
    if rows.size < 4 or len(spec.candidates) == 1:
        return spec.candidates[0]
    pairs = _holdout_splits(rows, spec.holdout, spec.splits, seed)
    best, best_score = None, np.inf
    for cand in spec.candidates:
        cand = _with_features(cand, spec.features)
        scores = []
        try:
            for train, hold in pairs:
                model = fit_one(cand, data, values, train)
                resid = values[hold] - predict(model, data, hold)
                scores.append(float(np.mean(resid * resid)))
        except np.linalg.LinAlgError:
            continue
        score = float(np.mean(scores))
        if score < best_score:
            best, best_score = cand, score
    return best if best is not None else spec.candidates[0]


def _with_features(spec, features):
    if features is not None and spec.features is None:
        return replace(spec, features=tuple(features))
    return spec


def fit_regressor(spec, data, targets, rows, features=None, seed: int = 0) -> FittedModel:
    """Fit a conditional-mean model of `targets` on the given rows.

    `targets` is aligned with the full dataset and read at `rows`.  `spec`
    may be a LearnerSpec, a SelectorSpec (holdout selection), or a
    FixedRegressor (no fitting; used to inject deliberately misspecified or
    oracle nuisances).
    """
    rows = _resolve_rows(rows)
    targets = np.asarray(targets, dtype=float)
    if isinstance(spec, FixedRegressor):
        feats = tuple(features) if features is not None else tuple(spec.features)
        return FittedModel("fixed", feats, rows, {"fn": spec.fn})
    if isinstance(spec, SelectorSpec):
        chosen = _select(_with_features(spec, features), data, targets, rows, seed,
                         lambda c, d, v, r: fit_regressor(c, d, v, r))
        return fit_regressor(chosen, data, targets, rows, features=features)
    spec = _with_features(spec, features)
    if spec.features is None:
        raise ParameterError("no feature columns given for learner fit")
    X = data.matrix(spec.features, rows)
    y = targets[rows]
    if not np.all(np.isfinite(y)):
        raise ParameterError("regression targets contain non-finite values")
    params = _FITTERS[spec.kind](X, y, spec)
    return FittedModel(spec.kind, spec.features, rows, params)


def fit_classifier(spec, data, labels, rows, features=None, seed: int = 0) -> FittedModel:
    """Fit a probability model P(label=1 | features) on the given rows.

    Labels must be 0/1.  If all labels on `rows` agree, the result is the
    constant model at the observed frequency regardless of learner kind.
    """
    rows = _resolve_rows(rows)
    labels = np.asarray(labels, dtype=float)
    y = labels[rows]
    if not np.all((y == 0) | (y == 1)):
        raise ParameterError("classifier labels must be 0 or 1")
    if isinstance(spec, FixedClassifier):
        feats = tuple(features) if features is not None else tuple(spec.features)
        return FittedModel("fixed", feats, rows, {"fn": spec.fn}, is_classifier=True)
    if np.all(y == y[0]):
        feats = tuple(features) if features is not None \
            else tuple(getattr(spec, "features", None) or ())
        return FittedModel("constant", feats, rows, {"value": float(y[0])},
                           is_classifier=True)
    if isinstance(spec, SelectorSpec):
        chosen = _select(_with_features(spec, features), data, labels, rows, seed,
                         lambda c, d, v, r: fit_classifier(c, d, v, r))
        return fit_classifier(chosen, data, labels, rows, features=features)
    spec = _with_features(spec, features)
    if spec.features is None:
        raise ParameterError("no feature columns given for classifier fit")
    X = data.matrix(spec.features, rows)
    params = _FITTERS[spec.kind](X, y, spec)
    return FittedModel(spec.kind, spec.features, rows, params, is_classifier=True)


def predict(model: FittedModel, data, rows) -> np.ndarray:
    """Evaluate a fitted model on the requested rows; classifiers return probabilities."""
    rows = np.asarray(rows, dtype=np.int64)
    X = data.matrix(model.features, rows)
    return model.predict_matrix(X)


def odds_from_probability(p, eps: float = ODDS_CLIP):
    """Odds p/(1-p) with interior clipping to [eps, 1-eps].

    Exact 0 maps to odds 0 and exact 1 maps to +inf; the +inf marker is
    consumed downstream as a zero weight.  Values outside [0, 1] are a
    domain error.
    """
    arr = np.asarray(p, dtype=float)
    if np.any(arr < 0) or np.any(arr > 1) or np.any(np.isnan(arr)):
        raise DomainError("probabilities must lie in [0, 1]")
    clipped = np.clip(arr, eps, 1 - eps)
    out = clipped / (1 - clipped)
    out = np.where(arr == 0, 0.0, out)
    out = np.where(arr == 1, np.inf, out)
    if np.isscalar(p) or arr.ndim == 0:
        return float(out)
    return out


def odds_clip_count(p, eps: float = ODDS_CLIP) -> int:
    """How many probabilities the odds transform clipped (exact 0/1 excluded)."""
    arr = np.asarray(p, dtype=float)
    return int(np.count_nonzero(((arr > 0) & (arr < eps)) |
                                ((arr > 1 - eps) & (arr < 1))))
