"""Prediction pipeline: preprocessing, ensembles, chunked context, quantile
utilities, anomaly scoring, imputation, row embeddings and lag features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import autodiff as ad
from .model import ModelParams, build_context_cache, cached_trunk, forward, forward_cached, quantile_levels
from .model.forward import ContextCache

CLIP = 100.0
MAX_CLASSES = 10
DENSITY_FLOOR = 1e-12


class InferenceError(ValueError):
    pass


class SchemaError(InferenceError):
    def __init__(self, message: str, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class UnsupportedTask(InferenceError):
    pass


class PreprocessError(InferenceError):
    pass


class ImputationError(InferenceError):
    pass


class InsufficientData(InferenceError):
    pass


def as_frame(table, columns=None) -> pd.DataFrame:
    """Coerce a DataFrame, 2-D array, mapping of columns or list of rows into a DataFrame."""
    if isinstance(table, pd.DataFrame):
        return table if columns is None else table.loc[:, list(columns)]
    if isinstance(table, dict):
        return pd.DataFrame(table)
    arr = table if isinstance(table, np.ndarray) else list(table)
    df = pd.DataFrame(arr, columns=columns)
    if columns is None:
        df.columns = [f"x{i}" for i in range(df.shape[1])]
    return df


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class PreprocessStats:
    columns: tuple
    kinds: dict  # column -> "numeric" | "categorical"
    categories: dict  # categorical column -> tuple of seen values, in first-appearance order
    mean: np.ndarray
    std: np.ndarray
    clip: float = CLIP
    z_threshold: float | None = 4.0


def _is_numeric(s: pd.Series) -> bool:
    return pd.api.types.is_numeric_dtype(s) and not pd.api.types.is_bool_dtype(s)


def _encode(stats_kinds, categories, df: pd.DataFrame) -> np.ndarray:
    out = np.empty((len(df), len(df.columns)), dtype=np.float64)
    for j, col in enumerate(df.columns):
        s = df[col]
        if stats_kinds[col] == "numeric":
            out[:, j] = pd.to_numeric(s, errors="coerce").to_numpy(dtype=np.float64, na_value=np.nan)
        else:
            cats = categories[col]
            lookup = {c: i for i, c in enumerate(cats)}
            out[:, j] = [np.nan if pd.isna(v) else lookup.get(v, len(cats)) for v in s]
    return out


def fit_preprocess(train, z_threshold: float | None = 4.0) -> PreprocessStats:
    df = as_frame(train)
    if len(df) == 0:
        raise PreprocessError("train table is empty")
    kinds, categories = {}, {}
    for col in df.columns:
        if _is_numeric(df[col]):
            kinds[col] = "numeric"
        else:
            kinds[col] = "categorical"
            categories[col] = tuple(pd.unique(df[col].dropna()))
    raw = _encode(kinds, categories, df)
    with np.errstate(invalid="ignore"):
        mean = np.nanmean(raw, axis=0) if raw.size else np.zeros(raw.shape[1])
    mean = np.where(np.isfinite(mean), mean, 0.0)
    filled = np.where(np.isnan(raw), mean, raw)
    std = filled.std(axis=0)
    return PreprocessStats(tuple(df.columns), kinds, categories, mean, std, CLIP, z_threshold)


def apply_preprocess(stats: PreprocessStats, table) -> np.ndarray:
    """Encode, mean-impute, z-score by train statistics and clip."""
    df = as_frame(table)
    missing = [c for c in stats.columns if c not in df.columns]
    extra = [c for c in df.columns if c not in stats.columns]
    if missing or extra:
        raise SchemaError(f"column mismatch: missing {missing}, unexpected {extra}", missing + extra)
    raw = _encode(stats.kinds, stats.categories, df.loc[:, list(stats.columns)])
    filled = np.where(np.isnan(raw), stats.mean, raw)
    safe = np.where(stats.std > 0, stats.std, 1.0)
    return np.clip((filled - stats.mean) / safe, -stats.clip, stats.clip)


def context_rows(stats: PreprocessStats, Z: np.ndarray) -> np.ndarray:
    """Boolean mask of train rows kept as context after z-score outlier removal."""
    if stats.z_threshold is None or Z.shape[1] == 0:
        return np.ones(len(Z), dtype=bool)
    keep = np.all(np.abs(Z) <= stats.z_threshold, axis=1)
    if not keep.any():
        raise PreprocessError("every train row was removed as an outlier")
    return keep


# ---------------------------------------------------------------------------
# ensembles


def latin_square(n: int) -> np.ndarray:
    """Cyclic Latin square: entry (i, j) = (i + j) mod n."""
    if n < 1:
        raise ValueError("n must be at least 1")
    i = np.arange(n)
    return (i[:, None] + i[None, :]) % n


@dataclass(frozen=True)
class EnsembleMember:
    permutation: np.ndarray  # position j reads original feature permutation[j]
    flip_target: bool
    signs: np.ndarray  # per original feature
    seed: int

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X * self.signs)[..., self.permutation]


def build_ensemble(n_members: int = 8, m: int = 1, seed: int = 0) -> list[EnsembleMember]:
    """Member ``i`` permutes features by row ``i mod m`` of the cyclic m-symbol Latin square,
    flips the target when ``i`` is odd and draws random feature signs. Member 0 is the
    untransformed input."""
    if n_members < 1:
        raise ValueError("n_members must be at least 1")
    square = latin_square(max(m, 1))
    members = []
    for i in range(n_members):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        signs = np.ones(m) if i == 0 else rng.choice([-1.0, 1.0], size=m)
        members.append(EnsembleMember(square[i % max(m, 1)][:m].copy(), bool(i % 2), signs, i))
    return members


# ---------------------------------------------------------------------------
# aggregation and quantile summaries


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PredictionResult:
    task: str
    predictions: np.ndarray
    member_count: int
    probabilities: np.ndarray | None = None
    classes: list | None = None
    quantiles: np.ndarray | None = None
    levels: np.ndarray | None = None

    def summary(self, interval_levels=(0.5, 0.9)) -> dict | None:
        if self.quantiles is None:
            return None
        return quantile_summary(self.quantiles, self.levels, interval_levels)


def aggregate(outputs: list[np.ndarray], task: str, y_mean: float = 0.0, y_std: float = 1.0) -> PredictionResult:
    """Combine un-flipped member outputs.

    Classification: average logits, then softmax. Regression: average
    quantile vectors, sort them, then map back to target units.
    """
    if not outputs:
        raise InferenceError("no member outputs to aggregate")
    stack = np.stack([np.asarray(o, dtype=np.float64) for o in outputs])
    mean = stack.mean(axis=0)
    if task == "classification":
        probs = softmax(mean)
        return PredictionResult(task, probs.argmax(axis=-1), len(outputs), probabilities=probs)
    q = np.sort(mean, axis=-1) * y_std + y_mean
    levels = quantile_levels(q.shape[-1])
    return PredictionResult(task, quantile_summary(q, levels)["median"], len(outputs), quantiles=q, levels=levels)


def quantile_summary(quantiles, levels, interval_levels=(0.5, 0.9)) -> dict:
    """Median, mean, variance and central intervals from a quantile function.

    The quantile function is extended flat to levels 0 and 1 and integrated
    with the trapezoid rule. Works on a single vector or a stack of them.
    """
    q = np.asarray(quantiles, dtype=np.float64)
    tau = np.asarray(levels, dtype=np.float64)
    grid = np.concatenate([[0.0], tau, [1.0]])
    qq = np.concatenate([q[..., :1], q, q[..., -1:]], axis=-1)
    mean = np.trapezoid(qq, grid, axis=-1)
    second = np.trapezoid(qq * qq, grid, axis=-1)
    variance = np.maximum(second - mean * mean, 0.0)

    def at(level):
        flat = q.reshape(-1, q.shape[-1])
        vals = np.array([np.interp(level, tau, row) for row in flat])
        return vals.reshape(q.shape[:-1])

    intervals = {}
    for c in interval_levels:
        a = 1.0 - c
        intervals[float(c)] = (at(a / 2), at(1 - a / 2))
    return {"mean": mean, "median": at(0.5), "variance": variance, "intervals": intervals}


# ---------------------------------------------------------------------------
# model calls


@dataclass(frozen=True)
class PredictOptions:
    n_members: int = 8
    chunk_size: int = 512
    seed: int = 0
    z_threshold: float | None = 4.0


def chunk_partition(n_train: int, chunk_size: int, seed: int = 0) -> list[np.ndarray]:
    """Contiguous chunks of a seeded shuffle; one chunk keeps the original order."""
    if chunk_size < 2:
        raise ValueError("chunk_size must be at least 2")
    n_chunks = -(-n_train // chunk_size)
    if n_chunks <= 1:
        return [np.arange(n_train)]
    order = np.random.default_rng(seed).permutation(n_train)
    return np.array_split(order, n_chunks)


def _head_output(params: ModelParams, X_train, y_train, X_test, task: str, n_classes: int) -> np.ndarray:
    dt = params.dtype
    X = np.concatenate([X_train, X_test]).astype(dt)
    with ad.no_grad():
        out = forward(params, X, np.asarray(y_train, dtype=np.float64), len(X_train), task)
    if task == "classification":
        return out.logits.data[0, :, :n_classes].astype(np.float64)
    return out.quantiles.data[0].astype(np.float64)


def chunked_context(params: ModelParams, X_train, y_train, X_test, task: str, n_classes: int = 0,
                    chunk_size: int = 512, seed: int = 0) -> np.ndarray:
    """Per-chunk forwards over (chunk, all test rows), averaged in logit/quantile space."""
    chunks = chunk_partition(len(X_train), chunk_size, seed)
    outs = [_head_output(params, X_train[idx], y_train[idx], X_test, task, n_classes) for idx in chunks]
    return outs[0] if len(outs) == 1 else np.mean(outs, axis=0)


def kv_cache_context(params: ModelParams, X_train, y_train, task: str) -> ContextCache:
    X = np.asarray(X_train).astype(params.dtype)
    return build_context_cache(params, X, np.asarray(y_train, dtype=np.float64), task)


def predict_with_cache(params: ModelParams, cache: ContextCache, X_batches, task: str, n_classes: int = 0) -> list[np.ndarray]:
    outs = []
    for Xq in X_batches:
        with ad.no_grad():
            out = forward_cached(params, cache, np.asarray(Xq).astype(params.dtype), task)
        outs.append(out.logits.data[0, :, :n_classes] if task == "classification" else out.quantiles.data[0])
    return outs


def _member_output(params, member: EnsembleMember, X_train, y_train, X_test, task, n_classes, chunk_size, seed):
    Xtr, Xte = member.transform(X_train), member.transform(X_test)
    if member.flip_target:
        y = (n_classes - 1 - y_train) if task == "classification" else -y_train
    else:
        y = y_train
    out = chunked_context(params, Xtr, y, Xte, task, n_classes, chunk_size, seed)
    if member.flip_target:
        out = out[..., ::-1] if task == "classification" else -out[..., ::-1]
    return out


def predict_matrix(params: ModelParams, X_train: np.ndarray, y_train: np.ndarray, X_test: np.ndarray, task: str,
                   n_classes: int = 0, options: PredictOptions = PredictOptions()) -> PredictionResult:
    """Ensemble prediction on already-preprocessed matrices. Classification labels are
    integer codes ``< n_classes``; regression targets are in their own units."""
    y_train = np.asarray(y_train, dtype=np.float64)
    mu = sd = None
    if task == "regression":
        mu = float(y_train.mean())
        sd = float(y_train.std()) or 1.0
        y_train = (y_train - mu) / sd
    members = build_ensemble(options.n_members, X_train.shape[1], options.seed)
    outs = [_member_output(params, mem, X_train, y_train, X_test, task, n_classes, options.chunk_size, options.seed)
            for mem in members]
    if task == "classification":
        return aggregate(outs, task)
    return aggregate(outs, task, mu, sd)


def _class_codes(y) -> tuple[np.ndarray, list]:
    values = list(pd.unique(pd.Series(list(y))))
    try:
        classes = sorted(values)
    except TypeError:
        classes = values
    lookup = {c: i for i, c in enumerate(classes)}
    return np.array([lookup[v] for v in y], dtype=np.float64), classes


def predict(params: ModelParams, X_train, y_train, X_test, task: str,
            options: PredictOptions = PredictOptions()) -> PredictionResult:
    """End-to-end: preprocess, build the ensemble, run each member (chunked) and aggregate."""
    if task not in ("classification", "regression"):
        raise UnsupportedTask(f"unknown task {task!r}")
    train, test = as_frame(X_train), as_frame(X_test)
    if len(train) == 0 or len(test) == 0:
        raise InferenceError("train and test must both be nonempty")
    if len(y_train) != len(train):
        raise SchemaError("target length differs from the train row count")
    if set(train.columns) != set(test.columns):
        bad = sorted(set(train.columns) ^ set(test.columns), key=str)
        raise SchemaError(f"train/test columns differ: {bad}", bad)
    y = np.asarray(list(y_train), dtype=object)
    if pd.isna(pd.Series(y)).any():
        raise InferenceError("target contains missing values")
    classes = None
    if task == "classification":
        y, classes = _class_codes(y)
        if len(classes) > MAX_CLASSES:
            raise UnsupportedTask(f"{len(classes)} classes; at most {MAX_CLASSES} are supported")
    else:
        y = y.astype(np.float64)
    stats = fit_preprocess(train, options.z_threshold)
    Ztr = apply_preprocess(stats, train)
    Zte = apply_preprocess(stats, test)
    keep = context_rows(stats, Ztr)
    res = predict_matrix(params, Ztr[keep], y[keep], Zte, task, len(classes) if classes else 0, options)
    if task == "classification":
        res.classes = classes
        res.predictions = np.array([classes[i] for i in res.predictions], dtype=object)
    return res


# ---------------------------------------------------------------------------
# derived tasks


def quantile_density(quantiles: np.ndarray, levels: np.ndarray, value: float) -> float:
    """Density at ``value`` from the bracketing quantile pair, dτ/dq.

    Beyond the outermost quantiles the density decays exponentially, keeping
    the remaining tail mass and matching the edge interval's density.
    """
    q, tau = np.asarray(quantiles, dtype=np.float64), np.asarray(levels, dtype=np.float64)
    if len(q) == 1:
        return DENSITY_FLOOR
    k = int(np.searchsorted(q, value, side="right")) - 1

    def between(i):
        return (tau[i + 1] - tau[i]) / max(q[i + 1] - q[i], DENSITY_FLOOR)

    if k < 0:
        d = between(0)
        return d * np.exp(-(q[0] - value) * d / tau[0])
    if k >= len(q) - 1:
        d = between(len(q) - 2)
        return d * np.exp(-(value - q[-1]) * d / (1.0 - tau[-1]))
    return between(k)


def anomaly_score(params: ModelParams, train, probes, n_members: int = 1, seed: int = 0) -> np.ndarray:
    """Negative mean log predicted density of each probe's observed values, one
    column at a time predicted from the others. Higher is more anomalous."""
    stats = fit_preprocess(as_frame(train), z_threshold=None)
    Ztr = apply_preprocess(stats, train)
    Zp = apply_preprocess(stats, probes)
    m = Ztr.shape[1]
    Q = params.config.n_quantiles
    levels = quantile_levels(Q)
    logd = np.zeros((len(Zp), m))
    opts = PredictOptions(n_members=n_members, seed=seed, z_threshold=None)
    for c in range(m):
        if m == 1:
            qs = np.broadcast_to(np.quantile(Ztr[:, 0], levels), (len(Zp), Q))
        else:
            others = [j for j in range(m) if j != c]
            qs = predict_matrix(params, Ztr[:, others], Ztr[:, c], Zp[:, others], "regression", 0, opts).quantiles
        dens = np.array([quantile_density(qs[i], levels, Zp[i, c]) for i in range(len(Zp))])
        logd[:, c] = np.log(np.maximum(dens, DENSITY_FLOOR))
    return -logd.mean(axis=1)


def impute(params: ModelParams, table, n_members: int = 1, seed: int = 0) -> pd.DataFrame:
    """Fill missing cells column by column, using the column's observed rows as context."""
    df = as_frame(table)
    out = df.copy()
    opts = PredictOptions(n_members=n_members, seed=seed, z_threshold=None)
    for col in df.columns:
        miss = df[col].isna().to_numpy()
        if not miss.any():
            continue
        if miss.all():
            raise ImputationError(f"column {col!r} has no observed values")
        observed = df.loc[~miss, col]
        categorical = not _is_numeric(df[col])
        others = [c for c in df.columns if c != col]
        if not others:
            fill = observed.mode().iloc[0] if categorical else float(observed.median())
            out.loc[miss, col] = fill
            continue
        stats = fit_preprocess(df.loc[:, others], z_threshold=None)
        Z = apply_preprocess(stats, df.loc[:, others])
        if categorical:
            codes, classes = _class_codes(observed.to_numpy())
            if len(classes) > MAX_CLASSES:
                raise UnsupportedTask(f"column {col!r} has {len(classes)} categories")
            res = predict_matrix(params, Z[~miss], codes, Z[miss], "classification", len(classes), opts)
            fill = [classes[i] for i in res.predictions]
        else:
            y = observed.to_numpy(dtype=np.float64)
            fill = predict_matrix(params, Z[~miss], y, Z[miss], "regression", 0, opts).predictions
        out.loc[miss, col] = fill
    return out


def embed_rows(params: ModelParams, table, context=None) -> np.ndarray:
    """Row-interaction outputs (before the ICL stage), one row per table row.

    ``context`` is ``(train_table, y, task)``. Without it the table is its
    own context with a constant target, so no label information enters.
    """
    df = as_frame(table)
    if context is None:
        ctx, y, task = df, np.zeros(len(df)), "regression"
    else:
        ctx, y, task = context
        ctx = as_frame(ctx)
        y = np.asarray(y)
        if task == "classification":
            y, _ = _class_codes(y)
        else:
            y = np.asarray(y, dtype=np.float64)
            y = (y - y.mean()) / (y.std() or 1.0)
    stats = fit_preprocess(ctx, z_threshold=None)
    Zc, Zt = apply_preprocess(stats, ctx), apply_preprocess(stats, df)
    cache = kv_cache_context(params, Zc, y, task)
    with ad.no_grad():
        h, _ = cached_trunk(params, cache, Zt.astype(params.dtype), task)
    return h.data[0].astype(np.float64)


@dataclass
class LagTable:
    X: np.ndarray
    y: np.ndarray
    X_query: np.ndarray
    y_query: np.ndarray
    X_future: np.ndarray
    columns: list = field(default_factory=list)


def ts_featurize(series, time=None, lags: int = 3, horizon: int = 1) -> LagTable:
    """Supervised rows (lag_1..lag_L, gaps between consecutive lag times) -> value
    ``horizon`` steps ahead. The last ``lags`` supervised rows are held out as the
    query set; windows whose target lies past the end form ``X_future``."""
    v = np.asarray(series, dtype=np.float64)
    t = np.arange(len(v), dtype=np.float64) if time is None else np.asarray(time, dtype=np.float64)
    if lags < 1 or horizon < 1:
        raise ValueError("lags and horizon must be positive")
    if len(v) < lags + horizon:
        raise InsufficientData(f"series of length {len(v)} is shorter than lags + horizon = {lags + horizon}")
    order = np.argsort(t, kind="stable")
    v, t = v[order], t[order]
    if np.any(np.diff(t) <= 0):
        raise InferenceError("time values must be distinct")

    def window(end):
        lo = end - lags + 1
        return np.concatenate([v[lo : end + 1], np.diff(t[lo : end + 1])])

    ends = np.arange(lags - 1, len(v) - horizon)
    X = np.stack([window(e) for e in ends])
    y = v[ends + horizon]
    future = np.stack([window(e) for e in range(max(lags - 1, len(v) - horizon), len(v))])
    n_query = min(lags, len(X) - 1)
    cols = [f"lag_{k}" for k in range(lags, 0, -1)] + [f"dt_{k}" for k in range(lags - 1, 0, -1)]
    split = len(X) - n_query
    return LagTable(X[:split], y[:split], X[split:], y[split:], future, cols)


__all__ = [
    "EnsembleMember", "ImputationError", "InferenceError", "InsufficientData", "LagTable", "PredictOptions",
    "PredictionResult", "PreprocessError", "PreprocessStats", "SchemaError", "UnsupportedTask", "aggregate",
    "anomaly_score", "apply_preprocess", "as_frame", "build_ensemble", "chunk_partition", "chunked_context",
    "context_rows", "embed_rows", "fit_preprocess", "impute", "kv_cache_context", "latin_square", "predict",
    "predict_matrix", "predict_with_cache", "quantile_density", "quantile_summary", "softmax", "ts_featurize",
]
