"""End-to-end synthetic dataset generation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .filter import FilterConfig, quality_filter
from .scm import (
    NonFiniteOutput,
    ScmGraph,
    assign_functions,
    inject_noise,
    propagate,
    sample_dag,
    sample_roots,
)

CLIP = 100.0


class DatasetRejected(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class GenerationError(RuntimeError):
    """No acceptable dataset within the retry cap."""


@dataclass(frozen=True)
class GeneratorConfig:
    min_rows: int = 64
    max_rows: int = 512
    min_features: int = 2
    max_features: int = 100
    min_classes: int = 2
    max_classes: int = 10
    noise_prob: float = 0.8
    reg_prob: float = 0.2
    min_density: float = 0.1
    max_density: float = 0.9
    max_retries: int = 50
    apply_filter: bool = True
    filter: FilterConfig = field(default_factory=FilterConfig)

    def __post_init__(self):
        if not (1 <= self.min_rows <= self.max_rows):
            raise ValueError("row range is empty")
        if not (1 <= self.min_features <= self.max_features):
            raise ValueError("feature range is empty")
        if not (2 <= self.min_classes <= self.max_classes <= 10):
            raise ValueError("class range must lie in [2, 10]")
        for name in ("noise_prob", "reg_prob", "min_density", "max_density"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.min_density > self.max_density:
            raise ValueError("density range is empty")


@dataclass
class SyntheticDataset:
    X: np.ndarray
    y: np.ndarray
    task: str
    n_classes: int | None
    seed: int
    graph: dict = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]


def postprocess(features: np.ndarray) -> np.ndarray:
    """Column z-score (population std), clip to [-100, 100]; constant columns become zeros."""
    X = np.asarray(features, dtype=np.float64)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    safe = np.where(sd > 0, sd, 1.0)
    Z = np.where(sd > 0, (X - mu) / safe, 0.0)
    return np.clip(Z, -CLIP, CLIP)


def to_classification(y: np.ndarray, n_classes: int, seed, jitter: float = 0.25, permute: bool = True) -> np.ndarray:
    """Bin a real target at jittered empirical quantiles into ``n_classes`` labels.

    Cut ``k`` sits at quantile ``(k + u) / n_classes`` with ``u`` uniform in
    ``[-jitter/2, jitter/2]``. Raises :class:`DatasetRejected` if ``y`` is
    constant or any class ends up empty.
    """
    if not 2 <= n_classes <= 10:
        raise ValueError("n_classes must lie in [2, 10]")
    y = np.asarray(y, dtype=np.float64)
    if np.ptp(y) == 0:
        raise DatasetRejected("degenerate-target")
    rng = np.random.default_rng(seed)
    levels = np.arange(1, n_classes) / n_classes
    if jitter:
        levels = levels + rng.uniform(-jitter / 2, jitter / 2, n_classes - 1) / n_classes
    cuts = np.quantile(y, np.sort(levels))
    labels = np.searchsorted(cuts, y, side="left")
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts == 0):
        raise DatasetRejected("empty-class")
    if permute:
        labels = rng.permutation(n_classes)[labels]
    return labels.astype(np.int64)


def _node_dims(n_nodes: int, n_features: int, rng) -> list[int]:
    dims = [int(d) for d in rng.integers(1, 5, size=n_nodes)]
    while sum(dims) < n_features + 2:
        dims[int(rng.integers(n_nodes))] += 1
    return dims


def _select_columns(graph: ScmGraph, outputs, n_features: int, rng):
    pool = [(i, j) for i, out in enumerate(outputs) for j in range(out.shape[1])]
    targets = [
        (i, j)
        for (i, j) in pool
        if graph.parents[i] and j not in set(graph.noise_masks[i].tolist())
    ]
    if not targets:
        raise DatasetRejected("no-target")
    t = targets[int(rng.integers(len(targets)))]
    rest = [c for c in pool if c != t]
    m = min(n_features, len(rest))
    picks = rng.choice(len(rest), size=m, replace=False)
    X = np.stack([outputs[rest[k][0]][:, rest[k][1]] for k in picks], axis=1)
    return X, outputs[t[0]][:, t[1]].copy()


def generate_attempt(config: GeneratorConfig, seed, task: str | None = None, n_rows: int | None = None,
                     n_features: int | None = None, n_classes: int | None = None) -> SyntheticDataset:
    """One pass of the pipeline; raises :class:`DatasetRejected` on any rejection."""
    rng = np.random.default_rng(seed)
    if task is None:
        task = "regression" if rng.random() < config.reg_prob else "classification"
    n = int(rng.integers(config.min_rows, config.max_rows + 1)) if n_rows is None else n_rows
    m = int(rng.integers(config.min_features, config.max_features + 1)) if n_features is None else n_features
    if task == "classification" and n_classes is None:
        n_classes = int(rng.integers(config.min_classes, config.max_classes + 1))
    n_nodes = int(rng.integers(2, 4 + (m + 1) // 2))
    density = float(rng.uniform(config.min_density, config.max_density))
    graph = sample_dag(n_nodes, density, rng, dims=_node_dims(n_nodes, m, rng))
    if not graph.parents[-1]:
        # guarantee at least one computed node to host the target
        graph.parents[-1] = [int(rng.integers(n_nodes - 1))]
    assign_functions(graph, rng)
    try:
        outputs = propagate(graph, sample_roots(graph, n, rng))
    except NonFiniteOutput:
        raise DatasetRejected("non-finite") from None
    outputs = inject_noise(graph, outputs, rng, prob=config.noise_prob)
    X, y = _select_columns(graph, outputs, m, rng)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DatasetRejected("non-finite")
    X = postprocess(X)
    if task == "classification":
        y = to_classification(y, n_classes, rng)
    else:
        if np.ptp(y) == 0:
            raise DatasetRejected("degenerate-target")
        y = postprocess(y[:, None])[:, 0]
        n_classes = None
    if config.apply_filter:
        verdict = quality_filter(X, y, task, config.filter, seed=int(rng.integers(2**31)))
        if not verdict.accepted:
            raise DatasetRejected(verdict.reason)
    return SyntheticDataset(X=X, y=y, task=task, n_classes=n_classes, seed=0, graph=graph.summary())


def generate_dataset(config: GeneratorConfig, seed: int, **overrides) -> SyntheticDataset:
    """Generate one accepted dataset, retrying rejected attempts up to ``config.max_retries``.

    ``overrides`` pins task / n_rows / n_features / n_classes for all attempts.
    """
    reasons = []
    for attempt in range(config.max_retries):
        try:
            ds = generate_attempt(config, np.random.SeedSequence([seed, attempt]), **overrides)
        except DatasetRejected as exc:
            reasons.append(exc.reason)
            continue
        ds.seed = seed
        ds.graph["attempt"] = attempt
        return ds
    raise GenerationError(f"seed {seed}: no dataset accepted in {config.max_retries} attempts; reasons {reasons}")
