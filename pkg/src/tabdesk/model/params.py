"""Parameter initialization and the checkpoint container."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..autodiff import Tensor
from .config import ModelConfig

CKPT_MAGIC = b"TDCK"
CKPT_VERSION = 1
UNKNOWN_LABEL = 10  # row index of the "label unknown" embedding


def lambda_schedule(n_blocks: int) -> tuple[np.ndarray, np.ndarray]:
    """Initial (resid, x0) blend scalars: linear from (1.0, 0.1) to (0.9, 0.02)."""
    if n_blocks == 1:
        return np.array([1.0]), np.array([0.1])
    return np.linspace(1.0, 0.9, n_blocks), np.linspace(0.1, 0.02, n_blocks)


class ModelParams:
    """Named learnable tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def astype(self, dtype) -> ModelParams:
        return ModelParams(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self})

    def copy(self) -> ModelParams:
        return self.astype(self.dtype)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
        return h.hexdigest()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self}


def init_params(config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float64) -> ModelParams:
    rng = np.random.default_rng(seed)
    d, D, k = config.d, config.icl_dim, config.inducing
    ff = config.ff_mult
    p: dict[str, np.ndarray] = {}

    def lin(name, fan_in, fan_out, gain=1.0, bias=True):
        p[f"{name}.W"] = rng.normal(0.0, gain / np.sqrt(fan_in), (fan_in, fan_out))
        if bias:
            p[f"{name}.b"] = np.zeros(fan_out)

    def norm(name, width):
        p[name] = np.ones(width)

    def attn(prefix, width):
        for w in ("q", "k", "v"):
            lin(f"{prefix}.{w}", width, width, bias=False)
        lin(f"{prefix}.o", width, width, gain=0.2, bias=False)

    def ffn(prefix, width):
        norm(f"{prefix}.norm", width)
        lin(f"{prefix}.up", width, ff * width)
        lin(f"{prefix}.down", ff * width, width, gain=0.2)

    def blend(prefix, n):
        lam_r, lam_x0 = lambda_schedule(n)
        for i in range(n):
            p[f"{prefix}.{i}.lam_resid"] = np.array(lam_r[i])
            p[f"{prefix}.{i}.lam_x0"] = np.array(lam_x0[i])

    lin("embed.group", 3, d)
    p["embed.class_table"] = rng.normal(0.0, 1.0, (config.max_classes + 1, d))
    lin("embed.reg", 1, d)

    blend("col", config.col_blocks)
    for i in range(config.col_blocks):
        b = f"col.{i}"
        p[f"{b}.inducing"] = rng.normal(0.0, 1.0, (k, d))
        norm(f"{b}.ind_norm", d)
        norm(f"{b}.ctx_norm", d)
        attn(f"{b}.sum", d)
        ffn(f"{b}.sum_ff", d)
        norm(f"{b}.row_norm", d)
        norm(f"{b}.mem_norm", d)
        attn(f"{b}.read", d)
        ffn(f"{b}.read_ff", d)
    norm("norm12", d)

    p["row.cls"] = rng.normal(0.0, 1.0, (config.cls_tokens, d))
    blend("row", config.row_blocks)
    for i in range(config.row_blocks):
        b = f"row.{i}"
        norm(f"{b}.attn_norm", d)
        attn(f"{b}.attn", d)
        ffn(f"{b}.ff", d)
    norm("norm23", D)

    blend("icl", config.icl_blocks)
    h, H = config.qassmax_hidden, config.icl_heads
    for i in range(config.icl_blocks):
        b = f"icl.{i}"
        norm(f"{b}.attn_norm", D)
        attn(f"{b}.attn", D)
        ffn(f"{b}.ff", D)
        lin(f"{b}.qass_base.in", 1, h)
        p[f"{b}.qass_base.in.b"] = rng.normal(0.0, 1.0, h)
        p[f"{b}.qass_base.out.W"] = np.zeros((h, H))
        p[f"{b}.qass_base.out.b"] = np.ones(H)
        lin(f"{b}.qass_gate.in", D, h)
        p[f"{b}.qass_gate.out.W"] = np.zeros((h, H))
        p[f"{b}.qass_gate.out.b"] = np.zeros(H)
    norm("icl.out_norm", D)

    lin("head.cls.hidden", D, D)
    lin("head.cls.out", D, config.max_classes, gain=0.5)
    lin("head.reg.hidden", D, D)
    lin("head.reg.out", D, config.n_quantiles, gain=0.5)
    p["head.reg.out.b"] = _normal_quantiles(config.n_quantiles)

    return ModelParams(config, {name: Tensor(v.astype(dtype), requires_grad=True) for name, v in p.items()})


def _normal_quantiles(q: int) -> np.ndarray:
    from scipy.stats import norm

    return norm.ppf(np.arange(1, q + 1) / (q + 1))


# ---------------------------------------------------------------------------
# checkpoint container


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    """Write a versioned container: magic, u32 version, u32 header length,
    JSON header (sorted keys), then raw little-endian tensor bytes."""
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dt = "<f8" if arr.dtype == np.float64 else "<f4" if arr.dtype == np.float32 else "<i8"
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen])
    base = 12 + hlen
    arrays = {}
    for e in header["tensors"]:
        buf = raw[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        native = np.dtype(e["dtype"]).newbyteorder("=")
        arrays[e["name"]] = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).astype(native)
    return arrays, header["meta"]


def save_checkpoint(path, params: ModelParams, extra_arrays: dict | None = None, extra_meta: dict | None = None) -> Path:
    arrays = {f"param/{k}": v for k, v in params.arrays().items()}
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra/{k}"] = v
    meta = {"config": params.config.to_dict(), "format": "tabdesk-checkpoint"}
    meta.update(extra_meta or {})
    return save_arrays(path, arrays, meta)


def load_checkpoint(path, dtype=None) -> tuple[ModelParams, dict, dict]:
    """Returns (params, extra arrays, meta)."""
    arrays, meta = load_arrays(path)
    config = ModelConfig.from_dict(meta["config"])
    tensors, extra = {}, {}
    for k, v in arrays.items():
        if k.startswith("param/"):
            arr = v if dtype is None else v.astype(dtype)
            tensors[k[len("param/"):]] = Tensor(np.array(arr), requires_grad=True)
        else:
            extra[k[len("extra/"):]] = np.array(v)
    return ModelParams(config, tensors), extra, meta
