"""ExtraTrees-based dataset quality filter.

The forest itself comes from scikit-learn with ``max_features=1``: one
feature drawn at random per split and a threshold drawn uniformly inside
that feature's range in the node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.ensemble import ExtraTreesClassifier, ExtraTreesRegressor
from sklearn.metrics import roc_auc_score


@dataclass(frozen=True)
class FilterConfig:
    n_trees: int = 16
    max_depth: int | None = None
    min_samples_leaf: int = 2
    val_fraction: float = 0.3
    # one-sided paired z-test: the forest must beat the constant baseline by this many SEs
    signal_z: float = 3.0
    too_easy: float = 0.99
    min_side_rows: int = 8


@dataclass(frozen=True)
class FilterResult:
    accepted: bool
    reason: str | None
    metrics: dict


def extratrees_fit(X: np.ndarray, y: np.ndarray, task: str, config: FilterConfig = FilterConfig(), seed: int = 0):
    kwargs = dict(
        n_estimators=config.n_trees,
        max_features=1,
        max_depth=config.max_depth,
        min_samples_leaf=config.min_samples_leaf,
        bootstrap=False,
        random_state=seed,
        n_jobs=1,
    )
    if task == "classification":
        return ExtraTreesClassifier(**kwargs).fit(X, np.asarray(y, dtype=int))
    return ExtraTreesRegressor(**kwargs).fit(X, np.asarray(y, dtype=float))


def extratrees_score(forest, X: np.ndarray, y: np.ndarray) -> dict:
    """Accuracy (plus AUC for two classes) or R^2 on ``(X, y)``."""
    if isinstance(forest, ExtraTreesClassifier):
        y = np.asarray(y, dtype=int)
        pred = forest.predict(X)
        out = {"accuracy": float(np.mean(pred == y))}
        classes = np.unique(y)
        if len(classes) == 2:
            proba = forest.predict_proba(X)
            seen = list(forest.classes_)
            pos = proba[:, seen.index(classes[1])] if classes[1] in seen else np.zeros(len(y))
            out["auc"] = float(roc_auc_score(y == classes[1], pos))
        return out
    y = np.asarray(y, dtype=float)
    pred = forest.predict(X)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float(((y - pred) ** 2).sum())
    return {"r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0}


def _split(n: int, val_fraction: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    return perm[n_val:], perm[:n_val]


def _beats(gain: np.ndarray, z: float) -> bool:
    """One-sided paired test that the mean per-row gain is positive."""
    mean = gain.mean()
    se = gain.std(ddof=1) / np.sqrt(len(gain)) if len(gain) > 1 else np.inf
    if se == 0:
        return mean > 0
    return mean > z * se


def quality_filter(X: np.ndarray, y: np.ndarray, task: str, config: FilterConfig = FilterConfig(), seed: int = 0) -> FilterResult:
    """Reject datasets without learnable signal or that are trivially easy.

    ``no-signal``: the forest's per-row gain over the constant baseline
    (majority class / training mean) is not significantly positive.
    ``too-easy``: binary AUC, or multiclass accuracy, above ``config.too_easy``.
    """
    rng = np.random.default_rng(seed)
    tr, va = _split(len(y), config.val_fraction, rng)
    if min(len(tr), len(va)) < config.min_side_rows:
        return FilterResult(False, "too-small", {})
    forest = extratrees_fit(X[tr], y[tr], task, config, seed)
    metrics = extratrees_score(forest, X[va], y[va])
    if task == "classification":
        yt, yv = np.asarray(y[tr], dtype=int), np.asarray(y[va], dtype=int)
        majority = np.bincount(yt).argmax()
        base_hit = (yv == majority).astype(float)
        hit = (forest.predict(X[va]) == yv).astype(float)
        metrics["baseline_accuracy"] = float(base_hit.mean())
        if not _beats(hit - base_hit, config.signal_z):
            return FilterResult(False, "no-signal", metrics)
        easy = metrics["auc"] if "auc" in metrics else metrics["accuracy"]
        if easy > config.too_easy:
            return FilterResult(False, "too-easy", metrics)
        return FilterResult(True, None, metrics)
    yt, yv = np.asarray(y[tr], dtype=float), np.asarray(y[va], dtype=float)
    pred = forest.predict(X[va])
    gain = (yv - yt.mean()) ** 2 - (yv - pred) ** 2
    if not _beats(gain, config.signal_z):
        return FilterResult(False, "no-signal", metrics)
    return FilterResult(True, None, metrics)
