"""Benchmark harness: seeded splits, reference methods, average ranks."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata
from sklearn.neighbors import KNeighborsClassifier, KNeighborsRegressor

from .inference import PredictOptions, predict
from .prior import read_dataset

log = logging.getLogger(__name__)

SPLIT_RATIOS = (0.64, 0.16, 0.20)
REPORT_COLUMNS = ("dataset", "task", "method", "metric_name", "metric", "rank")


class IncompleteTable(ValueError):
    pass


def split_dataset(n_rows: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded shuffle, then train/validation take floor(64%)/floor(16%) of rows and
    test takes the rest. Returns index arrays."""
    if n_rows < 10:
        raise ValueError("need at least 10 rows to split")
    perm = np.random.default_rng(seed).permutation(n_rows)
    n_train = int(np.floor(n_rows * SPLIT_RATIOS[0] + 1e-9))
    n_val = int(np.floor(n_rows * SPLIT_RATIOS[1] + 1e-9))
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def avg_rank(metrics, higher_is_better) -> np.ndarray:
    """Average rank per method (columns) over datasets (rows); rank 1 is best,
    ties share the mean of their positions.

    ``higher_is_better`` is a bool or one bool per dataset.
    """
    M = np.asarray(metrics, dtype=np.float64)
    if M.ndim != 2 or M.shape[1] == 0:
        raise IncompleteTable("metric table must be datasets x methods")
    if np.any(np.isnan(M)):
        raise IncompleteTable("metric table has missing cells")
    hib = np.broadcast_to(np.asarray(higher_is_better, dtype=bool), (M.shape[0],))
    return dataset_ranks(M, hib).mean(axis=0)


def dataset_ranks(M: np.ndarray, hib: np.ndarray) -> np.ndarray:
    signed = np.where(hib[:, None], -M, M)
    return np.vstack([rankdata(row, method="average") for row in signed])


# ---------------------------------------------------------------------------
# methods


def _fit_predict_model(params, Xtr, ytr, Xte, task, options):
    return predict(params, Xtr, ytr, Xte, task, options).predictions


def _fit_predict_knn(Xtr, ytr, Xte, task):
    est = KNeighborsClassifier(1) if task == "classification" else KNeighborsRegressor(1)
    return est.fit(Xtr, ytr).predict(Xte)


def _fit_predict_baseline(ytr, n_test, task):
    if task == "classification":
        return np.full(n_test, np.bincount(np.asarray(ytr, dtype=int)).argmax())
    return np.full(n_test, float(np.mean(ytr)))


METHODS = ("model", "knn1", "baseline")


def score(y_true, y_pred, task) -> float:
    """Accuracy for classification, RMSE for regression."""
    y_true = np.asarray(y_true)
    if task == "classification":
        return float(np.mean(np.asarray(y_pred).astype(y_true.dtype) == y_true))
    return float(np.sqrt(np.mean((np.asarray(y_pred, dtype=float) - y_true) ** 2)))


@dataclass
class BenchResult:
    datasets: list[str]
    tasks: list[str]
    methods: list[str]
    metrics: np.ndarray  # datasets x methods; failures hold the worst possible value
    failed: np.ndarray  # bool, datasets x methods
    ranks: np.ndarray
    average_rank: np.ndarray

    def report(self, sep: str = "\t") -> str:
        lines = [sep.join(REPORT_COLUMNS)]
        for i, name in enumerate(self.datasets):
            metric_name = "accuracy" if self.tasks[i] == "classification" else "rmse"
            for j, meth in enumerate(self.methods):
                val = "failed" if self.failed[i, j] else f"{self.metrics[i, j]:.6f}"
                lines.append(sep.join([name, self.tasks[i], meth, metric_name, val, f"{self.ranks[i, j]:g}"]))
        for j, meth in enumerate(self.methods):
            lines.append(sep.join(["average", "-", meth, "avg_rank", f"{self.average_rank[j]:.6f}", "-"]))
        return "\n".join(lines) + "\n"


def bench_run(data_dir, methods=METHODS, params=None, seed: int = 0,
              options: PredictOptions = PredictOptions()) -> BenchResult:
    """Evaluate each method on the test split of every archive in ``data_dir``.
    A method that raises on a dataset gets that dataset's worst rank."""
    methods = list(methods)
    if not methods:
        raise ValueError("at least one method is required")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; choose from {list(METHODS)}")
    files = sorted(Path(data_dir).glob("*.tdsy"))
    if not files:
        raise FileNotFoundError(f"no dataset archives in {data_dir}")
    names, tasks, rows, fails = [], [], [], []
    for path in files:
        ds = read_dataset(path)
        tr, _, te = split_dataset(ds.n_rows, seed)
        Xtr, Xte = ds.X[tr].astype(np.float64), ds.X[te].astype(np.float64)
        ytr, yte = ds.y[tr], ds.y[te]
        if ds.task == "classification":
            ytr, yte = ytr.astype(int), yte.astype(int)
        vals, bad = [], []
        for meth in methods:
            try:
                if meth == "model":
                    if params is None:
                        raise ValueError("no model parameters supplied")
                    pred = _fit_predict_model(params, Xtr, ytr, Xte, ds.task, options)
                elif meth == "knn1":
                    pred = _fit_predict_knn(Xtr, ytr, Xte, ds.task)
                else:
                    pred = _fit_predict_baseline(ytr, len(te), ds.task)
                vals.append(score(yte, pred, ds.task))
                bad.append(False)
            except Exception as exc:  # a failing method must not abort the run
                log.warning("%s failed on %s: %s", meth, path.name, exc)
                vals.append(-np.inf if ds.task == "classification" else np.inf)
                bad.append(True)
        names.append(path.stem)
        tasks.append(ds.task)
        rows.append(vals)
        fails.append(bad)
    M = np.array(rows)
    hib = np.array([t == "classification" for t in tasks])
    ranks = dataset_ranks(M, hib)
    return BenchResult(names, tasks, methods, M, np.array(fails), ranks, ranks.mean(axis=0))
