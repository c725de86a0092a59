"""Random DAG structural causal models: structure, node functions, roots, noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FUNCTION_TYPES = (
    "linear",
    "mlp",
    "quadratic",
    "discretize",
    "tree_ensemble",
    "gaussian_process",
    "em_plateau",
    "product",
)
ROOT_DISTRIBUTIONS = ("normal", "uniform", "lognormal", "mixture", "zipf")
MAX_PARENTS = 10
MAX_NOISE_DIMS = 3


class NonFiniteOutput(ArithmeticError):
    """A node produced NaN/Inf; the dataset must be regenerated."""


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class ScmGraph:
    """A DAG over nodes ``0..n-1`` where every parent index is below its child."""

    parents: list[list[int]]
    dims: list[int]
    functions: list[str | None] = field(default_factory=list)
    node_params: list[dict | None] = field(default_factory=list)
    noise_masks: list[np.ndarray] = field(default_factory=list)
    noise_touched: list[bool] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return len(self.parents)

    @property
    def roots(self) -> list[int]:
        return [i for i, p in enumerate(self.parents) if not p]

    def summary(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "n_edges": sum(len(p) for p in self.parents),
            "dims": list(self.dims),
            "functions": list(self.functions),
            "noise_dims": [int(len(m)) for m in self.noise_masks],
            "noise_touched": [bool(t) for t in self.noise_touched],
            "parents": [list(p) for p in self.parents],
        }


def sample_dag(n_nodes: int, density: float, seed, dims=None, max_parents: int = MAX_PARENTS) -> ScmGraph:
    """Sample parents for each node from lower indices.

    Every earlier node becomes a parent with probability ``density``; the set
    is then trimmed to ``max_parents`` at random.
    """
    if n_nodes < 1:
        raise ValueError("a DAG needs at least one node")
    rng = _rng(seed)
    parents = []
    for i in range(n_nodes):
        chosen = np.flatnonzero(rng.random(i) < density)
        if len(chosen) > max_parents:
            chosen = np.sort(rng.choice(chosen, size=max_parents, replace=False))
        parents.append([int(c) for c in chosen])
    if dims is None:
        dims = [int(d) for d in rng.integers(1, 5, size=n_nodes)]
    return ScmGraph(parents=parents, dims=list(dims), functions=[None] * n_nodes,
                    node_params=[None] * n_nodes,
                    noise_masks=[np.zeros(0, dtype=int) for _ in range(n_nodes)])


# ---------------------------------------------------------------------------
# node functions


def _sample_function_params(kind: str, d_in: int, d_out: int, rng: np.random.Generator) -> dict:
    scale = 1.0 / np.sqrt(d_in)
    if kind == "linear":
        return {"W": rng.normal(0, scale, (d_in, d_out)), "b": rng.normal(0, 0.5, d_out)}
    if kind == "mlp":
        widths = [d_in] + [int(rng.integers(4, 17)) for _ in range(int(rng.integers(1, 3)))] + [d_out]
        layers = [
            (rng.normal(0, 1.0 / np.sqrt(a), (a, b)), rng.normal(0, 0.5, b))
            for a, b in zip(widths[:-1], widths[1:])
        ]
        acts = [str(rng.choice(["tanh", "relu", "sine"])) for _ in widths[1:-1]]
        return {"layers": layers, "acts": acts}
    if kind == "quadratic":
        rank = int(rng.integers(1, min(d_in, 3) + 1))
        return {"U": rng.normal(0, scale, (d_out, d_in, rank)), "V": rng.normal(0, scale, (d_out, d_in, rank))}
    if kind == "discretize":
        return {"W": rng.normal(0, scale, (d_in, d_out)), "bins": rng.integers(2, 17, size=d_out)}
    if kind == "tree_ensemble":
        n_steps = int(rng.integers(2, 9))
        return {
            "feature": rng.integers(0, d_in, size=n_steps),
            "quantile": rng.uniform(0.1, 0.9, size=n_steps),
            "low": rng.normal(0, 1, (n_steps, d_out)),
            "high": rng.normal(0, 1, (n_steps, d_out)),
        }
    if kind == "gaussian_process":
        n_feat = 32
        length = float(np.exp(rng.uniform(np.log(0.3), np.log(3.0))))
        return {
            "omega": rng.normal(0, 1.0 / length, (d_in, n_feat)),
            "phase": rng.uniform(0, 2 * np.pi, n_feat),
            "beta": rng.normal(0, 1, (n_feat, d_out)),
        }
    if kind == "em_plateau":
        k = int(rng.integers(2, 9))
        return {
            "centers": rng.normal(0, 1, (k, d_in)),
            "values": rng.normal(0, 1, (k, d_out)),
            "temperature": float(rng.uniform(0.02, 0.2)),
        }
    if kind == "product":
        return {
            "W1": rng.normal(0, scale, (d_in, d_out)), "b1": rng.normal(0, 0.5, d_out),
            "W2": rng.normal(0, scale, (d_in, d_out)), "b2": rng.normal(0, 0.5, d_out),
        }
    raise ValueError(f"unknown function type {kind!r}")


_ACTS = {"tanh": np.tanh, "relu": lambda z: np.maximum(z, 0.0), "sine": np.sin}


def apply_function(kind: str, params: dict, X: np.ndarray) -> np.ndarray:
    """Evaluate one node function on its concatenated (standardized) parent inputs."""
    if kind == "linear":
        return X @ params["W"] + params["b"]
    if kind == "mlp":
        h = X
        for i, (W, b) in enumerate(params["layers"]):
            h = h @ W + b
            if i < len(params["acts"]):
                h = _ACTS[params["acts"][i]](h)
        return h
    if kind == "quadratic":
        # out_j = sum_r (X U_j[:, r]) * (X V_j[:, r])  ==  x^T (U_j V_j^T) x
        xu = np.einsum("ni,jir->njr", X, params["U"])
        xv = np.einsum("ni,jir->njr", X, params["V"])
        return (xu * xv).sum(axis=-1)
    if kind == "discretize":
        z = X @ params["W"]
        out = np.empty_like(z)
        for j, nb in enumerate(params["bins"]):
            edges = np.quantile(z[:, j], np.linspace(0, 1, int(nb) + 1))
            centers = 0.5 * (edges[:-1] + edges[1:])
            idx = np.clip(np.searchsorted(edges[1:-1], z[:, j], side="right"), 0, int(nb) - 1)
            out[:, j] = centers[idx]
        return out
    if kind == "tree_ensemble":
        out = np.zeros((X.shape[0], params["low"].shape[1]))
        for f, q, lo, hi in zip(params["feature"], params["quantile"], params["low"], params["high"]):
            col = X[:, f]
            thr = np.quantile(col, q)
            out += np.where((col > thr)[:, None], hi[None, :], lo[None, :])
        return out
    if kind == "gaussian_process":
        n_feat = params["omega"].shape[1]
        z = np.sqrt(2.0 / n_feat) * np.cos(X @ params["omega"] + params["phase"])
        return z @ params["beta"]
    if kind == "em_plateau":
        d2 = ((X[:, None, :] - params["centers"][None, :, :]) ** 2).sum(-1) / X.shape[1]
        logits = -d2 / params["temperature"]
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        return w @ params["values"]
    if kind == "product":
        return (X @ params["W1"] + params["b1"]) * (X @ params["W2"] + params["b2"])
    raise ValueError(f"unknown function type {kind!r}")


def assign_functions(graph: ScmGraph, seed) -> ScmGraph:
    """Tag each non-root node with a uniformly drawn function type and its parameters."""
    rng = _rng(seed)
    functions, node_params = [], []
    for i, parents in enumerate(graph.parents):
        if not parents:
            functions.append(None)
            node_params.append(None)
            continue
        kind = FUNCTION_TYPES[int(rng.integers(len(FUNCTION_TYPES)))]
        d_in = sum(graph.dims[p] for p in parents)
        functions.append(kind)
        node_params.append(_sample_function_params(kind, d_in, graph.dims[i], rng))
    graph.functions = functions
    graph.node_params = node_params
    return graph


# ---------------------------------------------------------------------------
# roots and propagation


def sample_root_column(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "normal":
        return rng.normal(0.0, 1.0, n)
    if kind == "uniform":
        return rng.uniform(-1.0, 1.0, n)
    if kind == "lognormal":
        sigma = rng.uniform(0.3, 1.0)
        v = rng.lognormal(0.0, sigma, n)
        mean = np.exp(sigma**2 / 2)
        std = np.sqrt((np.exp(sigma**2) - 1) * np.exp(sigma**2))
        return (v - mean) / std
    if kind == "mixture":
        gap = rng.uniform(1.0, 4.0)
        pick = rng.random(n) < rng.uniform(0.2, 0.8)
        return np.where(pick, rng.normal(-gap / 2, 1.0, n), rng.normal(gap / 2, 1.0, n))
    if kind == "zipf":
        return zipf_categories(n, rng)[1]
    raise ValueError(f"unknown root distribution {kind!r}")


def zipf_categories(n: int, rng: np.random.Generator, n_categories: int | None = None):
    """Zipf-distributed category indices and their random real-valued codes."""
    k = int(rng.integers(2, 11)) if n_categories is None else n_categories
    p = 1.0 / np.arange(1, k + 1) ** rng.uniform(1.0, 2.0)
    cats = rng.choice(k, size=n, p=p / p.sum())
    codes = rng.normal(0.0, 1.0, k)
    return cats, codes[cats]


def sample_roots(graph: ScmGraph, n_rows: int, seed) -> dict[int, np.ndarray]:
    """Draw each root column from a distribution picked uniformly per column."""
    if n_rows < 1:
        raise ValueError("n_rows must be positive")
    rng = _rng(seed)
    roots = {}
    for r in graph.roots:
        cols = [sample_root_column(str(rng.choice(ROOT_DISTRIBUTIONS)), n_rows, rng) for _ in range(graph.dims[r])]
        roots[r] = np.stack(cols, axis=1)
    return roots


def _standardize(X: np.ndarray) -> np.ndarray:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    return np.where(sd > 1e-12, (X - mu) / np.where(sd > 1e-12, sd, 1.0), 0.0)


def propagate(graph: ScmGraph, roots: dict[int, np.ndarray]) -> list[np.ndarray]:
    """Evaluate all nodes in index (= topological) order.

    Parent outputs are concatenated and standardized before the node function.
    """
    if sorted(roots) != graph.roots:
        raise ValueError("root values do not match the graph's roots")
    outputs: list[np.ndarray] = []
    for i, parents in enumerate(graph.parents):
        if not parents:
            out = np.asarray(roots[i], dtype=np.float64)
        else:
            X = _standardize(np.concatenate([outputs[p] for p in parents], axis=1))
            out = apply_function(graph.functions[i], graph.node_params[i], X)
        if not np.all(np.isfinite(out)):
            raise NonFiniteOutput(f"node {i} ({graph.functions[i]}) produced non-finite values")
        outputs.append(out)
    return outputs


def inject_noise(graph: ScmGraph, outputs: list[np.ndarray], seed, prob: float = 0.8) -> list[np.ndarray]:
    """Overwrite up to ``min(3, dim - 1)`` output dimensions per node with fresh root-style draws.

    Each node is touched with probability ``prob``; the touched node then
    replaces ``k ~ Uniform{0..min(3, dim-1)}`` of its dimensions. The chosen
    indices are recorded in ``graph.noise_masks`` and the touch draws in
    ``graph.noise_touched`` (a touched node may still draw ``k = 0``).
    """
    rng = _rng(seed)
    new_outputs, masks, touched = [], [], []
    for i, out in enumerate(outputs):
        dim = out.shape[1]
        mask = np.zeros(0, dtype=int)
        hit = bool(rng.random() < prob)
        touched.append(hit)
        if hit:
            k = int(rng.integers(0, min(MAX_NOISE_DIMS, dim - 1) + 1))
            if k:
                mask = np.sort(rng.choice(dim, size=k, replace=False))
        if len(mask):
            out = out.copy()
            for j in mask:
                out[:, j] = sample_root_column(str(rng.choice(ROOT_DISTRIBUTIONS)), out.shape[0], rng)
        new_outputs.append(out)
        masks.append(mask)
    graph.noise_masks = masks
    graph.noise_touched = touched
    return new_outputs
