"""One-file-per-dataset binary archive.

Layout (little-endian): magic ``b"TDSY"``, u16 version, u32 n, u32 m,
u8 task (0 classification, 1 regression), u16 n_classes (0 for regression),
u64 seed; then ``n*m`` float32 features row-major; then ``n`` float32 targets.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .generate import SyntheticDataset

MAGIC = b"TDSY"
VERSION = 1
_HEADER = struct.Struct("<4sHIIBHQ")
_TASKS = {"classification": 0, "regression": 1}


def dataset_bytes(ds: SyntheticDataset) -> bytes:
    n, m = ds.X.shape
    header = _HEADER.pack(MAGIC, VERSION, n, m, _TASKS[ds.task], ds.n_classes or 0, ds.seed)
    return (
        header
        + np.ascontiguousarray(ds.X, dtype="<f4").tobytes()
        + np.ascontiguousarray(ds.y, dtype="<f4").tobytes()
    )


def write_dataset(path, ds: SyntheticDataset) -> Path:
    path = Path(path)
    path.write_bytes(dataset_bytes(ds))
    return path


def read_dataset(path) -> SyntheticDataset:
    raw = Path(path).read_bytes()
    magic, version, n, m, task, n_classes, seed = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a dataset archive")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported archive version {version}")
    off = _HEADER.size
    X = np.frombuffer(raw, dtype="<f4", count=n * m, offset=off).reshape(n, m).astype(np.float64)
    y = np.frombuffer(raw, dtype="<f4", count=n, offset=off + 4 * n * m).astype(np.float64)
    task_name = "classification" if task == 0 else "regression"
    if task_name == "classification":
        y = y.astype(np.int64)
    return SyntheticDataset(X=X, y=y, task=task_name, n_classes=n_classes or None, seed=seed)
