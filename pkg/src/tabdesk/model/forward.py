"""Three-stage forward pass: column embedding, row interaction, in-context learning.

Inputs carry a leading dataset axis ``B``; all datasets in a call share the
row count ``n``, the feature count ``m`` and the split point ``n_train``
(rows ``[:n_train]`` are labeled context, the rest are queries).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from .params import UNKNOWN_LABEL, ModelParams


class ContractError(ValueError):
    """Inputs violate a forward-pass precondition."""


# ---------------------------------------------------------------------------
# stability helpers


def bounded(x: Tensor, cmax: float) -> Tensor:
    """``cmax * tanh(x / cmax)``: output confined to (-cmax, cmax).

    Once tanh rounds to exactly 1 the product would reach ``cmax`` itself, so
    the result is clamped to the nearest representable values inside the open
    interval. The clamp only acts where the tanh derivative is already zero.
    """
    out = ad.tanh(x * (1.0 / cmax)) * cmax
    edge = float(np.nextafter(out.dtype.type(cmax), out.dtype.type(0)))
    return ad.clip(out, -edge, edge)


def softcap(logits: Tensor, c: float) -> Tensor:
    return bounded(logits, c)


def residual_blend(x_prev: Tensor, x0: Tensor, lam_resid: Tensor, lam_x0: Tensor) -> Tensor:
    if x_prev.shape != x0.shape:
        raise ContractError(f"blend shapes differ: {x_prev.shape} vs {x0.shape}")
    return x_prev * lam_resid + x0 * lam_x0


def qassmax_base(params: ModelParams, block: str, n_context: int, dtype=np.float64) -> Tensor:
    """Per-head base factor from ``log n``, bounded to ``(-cmax, cmax)``."""
    if n_context < 1:
        raise ContractError("QASSMax needs at least one context row")
    log_n = Tensor(np.array([[np.log(n_context)]], dtype=dtype))
    hidden = ad.gelu(ad.linear(log_n, params[f"{block}.qass_base.in.W"], params[f"{block}.qass_base.in.b"]))
    raw = ad.linear(hidden, params[f"{block}.qass_base.out.W"], params[f"{block}.qass_base.out.b"])
    return bounded(raw, params.config.qassmax_cmax).reshape(-1)


def qassmax_scale(params: ModelParams, block: str, n_context: int, q: Tensor) -> Tensor:
    """Per-row, per-head query multiplier ``base(log n) * (1 + tanh(gate(q)))``.

    ``q`` is (..., D); the result is (..., H).
    """
    base = qassmax_base(params, block, n_context, q.dtype)
    g = ad.gelu(ad.linear(q, params[f"{block}.qass_gate.in.W"], params[f"{block}.qass_gate.in.b"]))
    gate = ad.linear(g, params[f"{block}.qass_gate.out.W"], params[f"{block}.qass_gate.out.b"])
    return (ad.tanh(gate) + 1.0) * base


# ---------------------------------------------------------------------------
# building blocks


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, width = x.shape
    return x.reshape(*lead, length, heads, width // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, length, heads * dh)


def _attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    dh = q.shape[-1]
    scores = ad.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def _ffn(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    eps = params.config.norm_eps
    h = ad.rms_norm(x, params[f"{prefix}.norm"], eps)
    h = ad.gelu(ad.linear(h, params[f"{prefix}.up.W"], params[f"{prefix}.up.b"]))
    return ad.linear(h, params[f"{prefix}.down.W"], params[f"{prefix}.down.b"])


def _cross_attention(params: ModelParams, prefix: str, q_in: Tensor, kv_in: Tensor, heads: int) -> Tensor:
    q = _split_heads(ad.linear(q_in, params[f"{prefix}.q.W"]), heads)
    k = _split_heads(ad.linear(kv_in, params[f"{prefix}.k.W"]), heads)
    v = _split_heads(ad.linear(kv_in, params[f"{prefix}.v.W"]), heads)
    return ad.linear(_merge_heads(_attend(q, k, v)), params[f"{prefix}.o.W"])


def _blend(params: ModelParams, stage: str, i: int, x: Tensor, x0: Tensor) -> Tensor:
    return residual_blend(x, x0, params[f"{stage}.{i}.lam_resid"], params[f"{stage}.{i}.lam_x0"])


# ---------------------------------------------------------------------------
# tokenization


def feature_groups(m: int) -> np.ndarray:
    """Feature index triples from three circular shifts of the column order.

    Shift ``s`` rotates the order by ``s`` and cuts it into consecutive
    triples; an incomplete last triple is filled by cycling its own members.
    Every feature therefore lands in exactly one group per shift.
    """
    if m < 1:
        raise ContractError("need at least one feature")
    groups = []
    for s in range(3):
        order = np.roll(np.arange(m), -s)
        for start in range(0, m, 3):
            chunk = order[start : start + 3]
            groups.append(np.resize(chunk, 3))
    return np.array(groups, dtype=np.intp)


def group_features(params: ModelParams, X: np.ndarray) -> Tensor:
    """(B, n, m) features -> (B, n, g, d) tokens through the shared 3->d projection."""
    idx = feature_groups(X.shape[-1])
    triples = Tensor(np.ascontiguousarray(X[..., idx]), dtype=params.dtype)
    return ad.linear(triples, params["embed.group.W"], params["embed.group.b"])


def label_embedding(params: ModelParams, y_train: np.ndarray, tasks, n_rows: int) -> Tensor:
    """(B, n, d) additive label offsets: train rows get their label's embedding,
    the remaining rows get the shared "unknown" embedding."""
    B, n_train = y_train.shape
    is_cls = np.array([t == "classification" for t in tasks])
    if np.any(is_cls):
        labels = y_train[is_cls]
        if np.any(labels < 0) or np.any(labels >= params.config.max_classes) or np.any(labels != np.round(labels)):
            raise ContractError(f"class labels must be integers in [0, {params.config.max_classes})")
    dtype = params.dtype
    table = params["embed.class_table"]
    unknown = ad.gather(table, [UNKNOWN_LABEL], axis=0).reshape(1, 1, -1)
    if n_train == 0:
        return unknown.broadcast_to((B, n_rows, table.shape[1]))
    cls_idx = np.where(is_cls[:, None], y_train, 0).astype(np.intp)
    parts = []
    if np.any(is_cls):
        mask = Tensor(is_cls.astype(dtype)[:, None, None])
        parts.append(ad.gather(table, cls_idx.reshape(-1), axis=0).reshape(B, n_train, -1) * mask)
    if not np.all(is_cls):
        yr = np.where(is_cls[:, None], 0.0, y_train).astype(dtype)[..., None]
        mask = Tensor((~is_cls).astype(dtype)[:, None, None])
        parts.append(ad.linear(Tensor(yr), params["embed.reg.W"], params["embed.reg.b"]) * mask)
    train = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    if n_rows == n_train:
        return train
    unknown = unknown.broadcast_to((B, n_rows - n_train, table.shape[1]))
    return ad.concat([train, unknown], axis=1)


def target_embed(params: ModelParams, tokens: Tensor, y_train: np.ndarray, n_train: int, tasks) -> Tensor:
    """Add the label embedding of each row to all of its feature tokens."""
    if y_train.shape[-1] != n_train:
        raise ContractError("labels must cover exactly the train rows")
    emb = label_embedding(params, y_train, tasks, tokens.shape[1])
    B, n, _, d = tokens.shape
    return tokens + emb.reshape(B, n, 1, d)


# ---------------------------------------------------------------------------
# caches


@dataclass
class ContextCache:
    """Train-row state reused across query batches."""

    n_train: int
    fingerprint: str
    n_features: int
    inducing: list[Tensor] = field(default_factory=list)
    kv: list[tuple[Tensor, Tensor]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# stage 1


def inducing_summary(params: ModelParams, i: int, x_train: Tensor) -> Tensor:
    """Inducing vectors of block ``i`` after attending to train rows (B, g, n_tr, d) -> (B, g, k, d)."""
    cfg = params.config
    pre = f"col.{i}"
    ind = params[f"{pre}.inducing"]
    q = ad.rms_norm(ind, params[f"{pre}.ind_norm"], cfg.norm_eps)
    ctx = ad.rms_norm(x_train, params[f"{pre}.ctx_norm"], cfg.norm_eps)
    h = ind + _cross_attention(params, f"{pre}.sum", q, ctx, cfg.col_heads)
    return h + _ffn(params, f"{pre}.sum_ff", h)


def read_back(params: ModelParams, i: int, x: Tensor, summary: Tensor) -> Tensor:
    cfg = params.config
    pre = f"col.{i}"
    q = ad.rms_norm(x, params[f"{pre}.row_norm"], cfg.norm_eps)
    mem = ad.rms_norm(summary, params[f"{pre}.mem_norm"], cfg.norm_eps)
    x = x + _cross_attention(params, f"{pre}.read", q, mem, cfg.col_heads)
    return x + _ffn(params, f"{pre}.read_ff", x)


def column_embed(params: ModelParams, tokens: Tensor, n_train: int | None,
                 cache: ContextCache | None = None, record: ContextCache | None = None) -> Tensor:
    """Column-wise ISAB stack on (B, n, g, d) tokens.

    Inducing summaries read only rows ``[:n_train]``; with a ``cache`` they
    are taken from it and every row in ``tokens`` is treated as a query.
    """
    x = tokens.transpose(0, 2, 1, 3)
    x0 = x
    for i in range(params.config.col_blocks):
        xt = _blend(params, "col", i, x, x0)
        if cache is not None:
            summary = cache.inducing[i]
        else:
            if n_train is None or n_train < 1:
                raise ContractError("column embedding needs at least one train row")
            summary = inducing_summary(params, i, xt[:, :, :n_train])
            if record is not None:
                record.inducing.append(summary)
        x = read_back(params, i, xt, summary)
    return x.transpose(0, 2, 1, 3)


# ---------------------------------------------------------------------------
# stage 2


def row_interact(params: ModelParams, tokens: Tensor) -> Tensor:
    """Per-row attention over [CLS..., feature tokens] with rotary positions.

    Returns the concatenated final CLS states, (B, n, cls_tokens * d).
    """
    cfg = params.config
    B, n, g, d = tokens.shape
    C = cfg.cls_tokens
    cls = params["row.cls"].reshape(1, 1, C, d).broadcast_to((B, n, C, d))
    x = ad.concat([cls, tokens], axis=2)
    L = C + g
    dh = d // cfg.row_heads
    tables = ad.rope_tables(np.arange(L), dh, cfg.rope_base, dtype=params.dtype)
    x0 = x
    for i in range(cfg.row_blocks):
        pre = f"row.{i}"
        xt = _blend(params, "row", i, x, x0)
        a = ad.rms_norm(xt, params[f"{pre}.attn_norm"], cfg.norm_eps)
        q = _split_heads(ad.linear(a, params[f"{pre}.attn.q.W"]), cfg.row_heads)
        k = _split_heads(ad.linear(a, params[f"{pre}.attn.k.W"]), cfg.row_heads)
        v = _split_heads(ad.linear(a, params[f"{pre}.attn.v.W"]), cfg.row_heads)
        q = ad.rope_rotate(q, None, tables=tables)
        k = ad.rope_rotate(k, None, tables=tables)
        x = xt + ad.linear(_merge_heads(_attend(q, k, v)), params[f"{pre}.attn.o.W"])
        x = x + _ffn(params, f"{pre}.ff", x)
    return x[:, :, :C, :].reshape(B, n, C * d)


# ---------------------------------------------------------------------------
# stage 3


def context_kv(params: ModelParams, i: int, a_train: Tensor) -> tuple[Tensor, Tensor]:
    cfg = params.config
    pre = f"icl.{i}.attn"
    k = _split_heads(ad.linear(a_train, params[f"{pre}.k.W"]), cfg.icl_heads)
    v = _split_heads(ad.linear(a_train, params[f"{pre}.v.W"]), cfg.icl_heads)
    return k, v


def icl_forward(params: ModelParams, h: Tensor, n_train: int | None,
                cache: ContextCache | None = None, record: ContextCache | None = None) -> Tensor:
    """Row-wise transformer whose keys/values come from train rows only.

    Train rows attend to all train rows; every other row attends to train
    rows and nothing else. With a ``cache`` the train keys/values are reused.
    """
    cfg = params.config
    n_ctx = cache.n_train if cache is not None else n_train
    if not n_ctx or n_ctx < 1:
        raise ContractError("in-context learning needs at least one train row")
    x, x0 = h, h
    for i in range(cfg.icl_blocks):
        pre = f"icl.{i}"
        xt = _blend(params, "icl", i, x, x0)
        a = ad.rms_norm(xt, params[f"{pre}.attn_norm"], cfg.norm_eps)
        if cache is not None:
            k, v = cache.kv[i]
        else:
            k, v = context_kv(params, i, a[:, :n_train])
            if record is not None:
                record.kv.append((k, v))
        q_flat = ad.linear(a, params[f"{pre}.attn.q.W"])
        scale = qassmax_scale(params, pre, n_ctx, q_flat)  # (B, n, H)
        scale = scale.swapaxes(-1, -2).reshape(*scale.shape[:-2], cfg.icl_heads, -1, 1)
        q = _split_heads(q_flat, cfg.icl_heads) * scale
        x = xt + ad.linear(_merge_heads(_attend(q, k, v)), params[f"{pre}.attn.o.W"])
        x = x + _ffn(params, f"{pre}.ff", x)
    return ad.rms_norm(x, params["icl.out_norm"], cfg.norm_eps)


# ---------------------------------------------------------------------------
# heads


def classify_head(params: ModelParams, hidden: Tensor) -> Tensor:
    """Soft-capped logits over ``max_classes`` classes."""
    z = ad.gelu(ad.linear(hidden, params["head.cls.hidden.W"], params["head.cls.hidden.b"]))
    raw = ad.linear(z, params["head.cls.out.W"], params["head.cls.out.b"])
    return softcap(raw, params.config.softcap)


def regress_head(params: ModelParams, hidden: Tensor) -> Tensor:
    """``n_quantiles`` values at levels k / (Q + 1), not forced monotone."""
    z = ad.gelu(ad.linear(hidden, params["head.reg.hidden.W"], params["head.reg.hidden.b"]))
    return ad.linear(z, params["head.reg.out.W"], params["head.reg.out.b"])


def quantile_levels(n_quantiles: int) -> np.ndarray:
    return np.arange(1, n_quantiles + 1) / (n_quantiles + 1)


# ---------------------------------------------------------------------------
# end to end


@dataclass
class ForwardOutput:
    """Head outputs for query rows. ``logits``/``quantiles`` cover the datasets
    listed in ``cls_index``/``reg_index`` respectively."""

    logits: Tensor | None
    quantiles: Tensor | None
    cls_index: np.ndarray
    reg_index: np.ndarray
    hidden: Tensor | None = None


def _as_batch(X, y_train, tasks):
    X = np.asarray(X)
    y_train = np.asarray(y_train, dtype=np.float64)
    if X.ndim == 2:
        X, y_train = X[None], y_train[None]
    if isinstance(tasks, str):
        tasks = [tasks] * X.shape[0]
    if len(tasks) != X.shape[0]:
        raise ContractError("one task tag per dataset")
    for t in tasks:
        if t not in ("classification", "regression"):
            raise ContractError(f"unknown task {t!r}")
    return X, y_train, list(tasks)


def _heads(params, hidden, tasks) -> ForwardOutput:
    cls_index = np.array([i for i, t in enumerate(tasks) if t == "classification"], dtype=np.intp)
    reg_index = np.array([i for i, t in enumerate(tasks) if t == "regression"], dtype=np.intp)
    logits = quantiles = None
    if len(cls_index):
        h = hidden if len(cls_index) == len(tasks) else ad.gather(hidden, cls_index, axis=0)
        logits = classify_head(params, h)
    if len(reg_index):
        h = hidden if len(reg_index) == len(tasks) else ad.gather(hidden, reg_index, axis=0)
        quantiles = regress_head(params, h)
    return ForwardOutput(logits, quantiles, cls_index, reg_index, hidden)


def embed_tokens(params: ModelParams, X: np.ndarray, y_train: np.ndarray, n_train: int, tasks) -> Tensor:
    tokens = group_features(params, X)
    return target_embed(params, tokens, y_train, n_train, tasks)


def trunk(params: ModelParams, X, y_train, n_train: int, tasks, record: ContextCache | None = None) -> tuple[Tensor, Tensor]:
    """All three stages on every row. Returns (stage-2 rows h, final ICL states)."""
    cfg = params.config
    tokens = embed_tokens(params, X, y_train, n_train, tasks)
    tokens = column_embed(params, tokens, n_train, record=record)
    tokens = ad.rms_norm(tokens, params["norm12"], cfg.norm_eps)
    h = row_interact(params, tokens)
    hn = ad.rms_norm(h, params["norm23"], cfg.norm_eps)
    return h, icl_forward(params, hn, n_train, record=record)


def forward(params: ModelParams, X, y_train, n_train: int, tasks) -> ForwardOutput:
    """Single pass over ``X`` (n x m, or B x n x m). Heads run on rows ``[n_train:]``."""
    X, y_train, tasks = _as_batch(X, y_train, tasks)
    n = X.shape[1]
    if not 1 <= n_train < n:
        raise ContractError(f"need 1 <= n_train < n, got n_train={n_train}, n={n}")
    if X.shape[2] < 1:
        raise ContractError("need at least one feature")
    _, hidden = trunk(params, X, y_train, n_train, tasks)
    return _heads(params, hidden[:, n_train:], tasks)


def build_context_cache(params: ModelParams, X_train, y_train, task: str) -> ContextCache:
    """Run the train rows once and keep their Stage-1 summaries and Stage-3 keys/values."""
    X_train, y_train, tasks = _as_batch(X_train, y_train, task)
    n_train = X_train.shape[1]
    cache = ContextCache(n_train=n_train, fingerprint=params.fingerprint(), n_features=X_train.shape[2])
    with ad.no_grad():
        trunk(params, X_train, y_train, n_train, tasks, record=cache)
    return cache


def cached_trunk(params: ModelParams, cache: ContextCache, X_query, tasks) -> tuple[Tensor, Tensor]:
    """Query rows only, reading the train context from ``cache``. Returns (stage-2 rows h, final ICL states)."""
    if cache.fingerprint != params.fingerprint():
        raise ContractError("context cache was built with different parameters")
    X_query = np.asarray(X_query)
    if X_query.ndim == 2:
        X_query = X_query[None]
    if X_query.shape[2] != cache.n_features:
        raise ContractError("query feature count differs from the cached context")
    if isinstance(tasks, str):
        tasks = [tasks] * X_query.shape[0]
    cfg = params.config
    B, nq, _ = X_query.shape
    tokens = group_features(params, X_query)
    emb = label_embedding(params, np.zeros((B, 0)), tasks, nq)
    tokens = tokens + emb.reshape(B, nq, 1, cfg.d)
    tokens = column_embed(params, tokens, None, cache=cache)
    tokens = ad.rms_norm(tokens, params["norm12"], cfg.norm_eps)
    h = row_interact(params, tokens)
    hn = ad.rms_norm(h, params["norm23"], cfg.norm_eps)
    return h, icl_forward(params, hn, None, cache=cache)


def forward_cached(params: ModelParams, cache: ContextCache, X_query, tasks) -> ForwardOutput:
    """Query rows only, reading the train context from ``cache``."""
    if isinstance(tasks, str):
        n_sets = 1 if np.ndim(X_query) == 2 else np.shape(X_query)[0]
        tasks = [tasks] * n_sets
    _, hidden = cached_trunk(params, cache, X_query, tasks)
    return _heads(params, hidden, tasks)
