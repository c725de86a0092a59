"""Unified pretraining loop: mixed-task batches, Muon + Adam, warmup-cosine."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ModelConfig, ModelParams, forward, init_params, quantile_levels
from .model.params import load_checkpoint, save_checkpoint
from .prior import GenerationError, GeneratorConfig, generate_dataset

log = logging.getLogger(__name__)

NS_COEFFS = (3.4445, -4.7750, 2.0315)
SLOT_REDRAWS = 4


class NonFiniteUpdate(FloatingPointError):
    """A gradient or optimizer update contained NaN/inf; the step should be skipped."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    min_rows: int = 64
    max_rows: int = 512
    min_features: int = 2
    max_features: int = 12
    reg_prob: float = 0.2
    min_classes: int = 2
    max_classes: int = 10
    min_train_frac: float = 0.3
    max_train_frac: float = 0.9
    peak_lr: float = 1e-2
    weight_decay: float = 0.05
    clip_norm: float = 10.0
    warmup_frac: float = 0.02
    momentum: float = 0.95
    ns_steps: int = 5
    adam_betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 250
    max_bad_steps: int = 10

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in (0, 1)")
        for name in ("steps", "batch_size", "min_rows", "peak_lr", "clip_norm", "ns_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not (self.min_rows <= self.max_rows and self.min_features <= self.max_features):
            raise ValueError("empty row or feature range")
        if not 0.0 <= self.reg_prob <= 1.0:
            raise ValueError("reg_prob must be a probability")
        if not 0.0 < self.min_train_frac <= self.max_train_frac < 1.0:
            raise ValueError("train fraction range must lie in (0, 1)")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


# ---------------------------------------------------------------------------
# losses


def pinball_loss(quantiles, levels, y) -> Tensor:
    """Mean pinball loss. ``quantiles`` has a trailing axis of size Q; ``y``
    broadcasts against ``quantiles[..., 0]``."""
    q = quantiles if isinstance(quantiles, Tensor) else Tensor(np.asarray(quantiles, dtype=np.float64))
    levels = np.asarray(levels, dtype=q.dtype)
    if levels.ndim != 1 or np.any(np.diff(levels) <= 0) or levels[0] <= 0 or levels[-1] >= 1:
        raise ValueError("levels must be strictly increasing inside (0, 1)")
    y = np.asarray(y, dtype=q.dtype)[..., None]
    u = (-q) + y
    return (ad.relu(u) * levels + ad.relu(-u) * (1.0 - levels)).mean()


def cross_entropy(logits, labels, n_classes=None) -> Tensor:
    """Mean ``-log softmax(logits)[label]``. Classes at or above ``n_classes``
    (scalar or per-leading-row array) are masked out of the softmax."""
    z = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.intp)
    C = z.shape[-1]
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError("label out of range")
    if n_classes is not None:
        k = np.asarray(n_classes).reshape(np.shape(n_classes) + (1,) * (z.ndim - np.ndim(n_classes)))
        if np.any(labels >= np.broadcast_to(k, labels.shape + (1,))[..., 0]):
            raise ValueError("label not below the class count")
        mask = np.arange(C) >= k
        z = ad.mask_fill(z, np.broadcast_to(mask, z.shape))
    logp = ad.log_softmax(z, axis=-1)
    onehot = (labels[..., None] == np.arange(C)).astype(z.dtype)
    return -(logp * onehot).sum(axis=-1).mean()


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    X: np.ndarray  # (B, n, m)
    y: np.ndarray  # (B, n)
    n_train: int
    tasks: list[str]
    n_classes: np.ndarray  # 0 for regression
    seeds: list[int] = field(default_factory=list)

    @property
    def n_regression(self) -> int:
        return sum(t == "regression" for t in self.tasks)


def make_batch(config: TrainConfig, step_seed, generator: GeneratorConfig | None = None) -> Batch:
    """Sample one batch. All datasets share row count, feature count and split;
    each is independently regression with probability ``reg_prob``."""
    gen = generator or GeneratorConfig(max_features=max(config.max_features, 2))
    rng = np.random.default_rng(step_seed)
    n = int(rng.integers(config.min_rows, config.max_rows + 1))
    m = int(rng.integers(config.min_features, config.max_features + 1))
    frac = rng.uniform(config.min_train_frac, config.max_train_frac)
    n_train = int(np.clip(round(frac * n), 1, n - 1))
    Xs, ys, tasks, ks, seeds = [], [], [], [], []
    for _ in range(config.batch_size):
        task = "regression" if rng.random() < config.reg_prob else "classification"
        for redraw in range(SLOT_REDRAWS):
            k = int(rng.integers(config.min_classes, config.max_classes + 1)) if task == "classification" else None
            seed = int(rng.integers(2**62))
            try:
                ds = generate_dataset(gen, seed, task=task, n_rows=n, n_features=m, n_classes=k)
                break
            except GenerationError:
                # some (rows, features, classes) combinations are hard to satisfy; redraw the slot
                if redraw == SLOT_REDRAWS - 1:
                    raise
        Xs.append(ds.X)
        ys.append(ds.y.astype(np.float64))
        tasks.append(task)
        ks.append(k or 0)
        seeds.append(seed)
    return Batch(np.stack(Xs), np.stack(ys), n_train, tasks, np.array(ks), seeds)


def batch_loss(params: ModelParams, batch: Batch) -> Tensor:
    """Unweighted mean over datasets of each dataset's mean query-row loss."""
    dt = params.dtype
    out = forward(params, batch.X.astype(dt), batch.y[:, : batch.n_train], batch.n_train, batch.tasks)
    y_query = batch.y[:, batch.n_train :]
    total = None
    if out.logits is not None:
        idx = out.cls_index
        ce = cross_entropy(out.logits, y_query[idx].astype(np.intp), batch.n_classes[idx])
        total = ce * float(len(idx))
    if out.quantiles is not None:
        idx = out.reg_index
        pl = pinball_loss(out.quantiles, quantile_levels(params.config.n_quantiles), y_query[idx])
        total = pl * float(len(idx)) if total is None else total + pl * float(len(idx))
    return total * (1.0 / len(batch.tasks))


# ---------------------------------------------------------------------------
# optimizer


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 10.0) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``. Returns (grads, pre-clip norm)."""
    sq = math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        raise NonFiniteUpdate("non-finite gradient")
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * g.dtype.type(scale) for k, g in grads.items()}, norm


def newton_schulz(G: np.ndarray, steps: int = 5, coeffs=NS_COEFFS, eps: float = 1e-7) -> np.ndarray:
    """Approximate the orthogonal polar factor U V^T of ``G`` with a quintic iteration."""
    a, b, c = coeffs
    X = np.asarray(G)
    X = X / (np.linalg.norm(X) + eps)
    tall = X.shape[0] > X.shape[1]
    if tall:
        X = X.T
    for _ in range(steps):
        A = X @ X.T
        B = b * A + c * (A @ A)
        X = a * X + B @ X
    return X.T if tall else X


def is_muon_param(name: str, shape) -> bool:
    """Weight matrices go to Muon; gains, biases, blend scalars and embedding tables do not."""
    return name.endswith(".W") and len(shape) == 2 and min(shape) > 1


@dataclass
class OptState:
    step: int = 0
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: ModelParams) -> OptState:
        st = cls()
        for name, t in params:
            if is_muon_param(name, t.shape):
                st.momentum[name] = np.zeros_like(t.data)
            else:
                st.adam_m[name] = np.zeros_like(t.data)
                st.adam_v[name] = np.zeros_like(t.data)
        return st

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"mom/{k}": v for k, v in self.momentum.items()}
        out.update({f"adam_m/{k}": v for k, v in self.adam_m.items()})
        out.update({f"adam_v/{k}": v for k, v in self.adam_v.items()})
        return out

    @classmethod
    def from_arrays(cls, step: int, arrays: dict[str, np.ndarray]) -> OptState:
        st = cls(step=step)
        for key, v in arrays.items():
            kind, name = key.split("/", 1)
            {"mom": st.momentum, "adam_m": st.adam_m, "adam_v": st.adam_v}[kind][name] = v
        return st


def _updates(params, grads, state, config, t):
    """Raw per-parameter updates plus the new optimizer buffers; nothing is mutated."""
    mu = config.momentum
    b1, b2 = config.adam_betas
    updates, new_mom, new_m, new_v = {}, {}, {}, {}
    for name, p in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name in state.momentum:
            buf = mu * state.momentum[name] + g
            nesterov = g + mu * buf
            O = newton_schulz(nesterov.astype(np.float32), config.ns_steps).astype(p.dtype)
            rows, cols = p.shape
            updates[name] = O * math.sqrt(max(rows, cols) / min(rows, cols))
            new_mom[name] = buf
        else:
            m = b1 * state.adam_m[name] + (1 - b1) * g
            v = b2 * state.adam_v[name] + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            updates[name] = mhat / (np.sqrt(vhat) + config.adam_eps)
            new_m[name], new_v[name] = m, v
    return updates, new_mom, new_m, new_v


def muon_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptState, lr: float, wd: float,
              config: TrainConfig = TrainConfig()) -> OptState:
    """One in-place update: Muon for weight matrices, Adam for everything else,
    decoupled weight decay on both. Raises :class:`NonFiniteUpdate` without
    touching parameters if any update is non-finite."""
    t = state.step + 1
    with np.errstate(invalid="ignore", over="ignore"):  # non-finite updates are caught below
        updates, new_mom, new_m, new_v = _updates(params, grads, state, config, t)
    if not all(np.all(np.isfinite(u)) for u in updates.values()):
        raise NonFiniteUpdate("non-finite optimizer update")
    decay = 1.0 - lr * wd
    for name, p in params:
        p.data = (p.data * decay - lr * updates[name]).astype(p.dtype)
    state.momentum.update(new_mom)
    state.adam_m.update(new_m)
    state.adam_v.update(new_v)
    state.step = t
    return state


def warmup_steps(total: int, warmup_frac: float = 0.02) -> int:
    return max(1, math.ceil(warmup_frac * total))


def lr_schedule(step: int, total: int, warmup_frac: float = 0.02, peak: float = 8e-4) -> float:
    """Linear warmup to ``peak`` over ceil(warmup_frac * total) steps, then cosine to 0."""
    if not 0 <= step <= total:
        raise ValueError("step outside [0, total]")
    w = warmup_steps(total, warmup_frac)
    if step < w:
        return peak * step / w
    if total == w:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (total - w)))


# ---------------------------------------------------------------------------
# loop


@dataclass
class StepRecord:
    step: int
    loss: float
    n_cls: int
    n_reg: int
    lr: float
    grad_norm: float
    seconds: float

    def line(self) -> str:
        return (f"{self.step}\t{self.loss:.6f}\t{self.n_cls}\t{self.n_reg}\t"
                f"{self.lr:.6e}\t{self.grad_norm:.6f}\t{self.seconds:.3f}")


LOG_HEADER = "step\tloss\tn_cls\tn_reg\tlr\tgrad_norm\tseconds"


@dataclass
class TrainResult:
    params: ModelParams
    state: OptState
    history: list[StepRecord]
    skipped: int = 0


def step_seed(seed: int, step: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, step])


def save_training_checkpoint(path, params: ModelParams, state: OptState, config: TrainConfig) -> Path:
    return save_checkpoint(path, params, extra_arrays=state.arrays(),
                           extra_meta={"train_config": config.to_dict(), "step": state.step})


def load_training_checkpoint(path) -> tuple[ModelParams, OptState, TrainConfig]:
    params, extra, meta = load_checkpoint(path)
    return params, OptState.from_arrays(int(meta["step"]), extra), TrainConfig.from_dict(meta["train_config"])


def train(config: TrainConfig = TrainConfig(), model_config: ModelConfig = ModelConfig(),
          generator: GeneratorConfig | None = None, out_dir=None, resume_from=None,
          stop_at: int | None = None, params: ModelParams | None = None) -> TrainResult:
    """Run (or resume) pretraining.

    Each step's batch is a pure function of ``(config.seed, step)``, so a run
    resumed from a checkpoint continues exactly as the uninterrupted run.
    ``stop_at`` ends the loop early (after that many completed steps) without
    changing the schedule. With ``out_dir`` set, a checkpoint is written every
    ``checkpoint_every`` steps plus at the end, and one line per step is
    appended to ``metrics.tsv``.
    """
    if resume_from is not None:
        params, state, saved = load_training_checkpoint(resume_from)
        if saved != config:
            log.warning("resuming with a config that differs from the checkpoint's")
    else:
        params = params if params is not None else init_params(model_config, config.seed, config.np_dtype)
        state = OptState.init(params)
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        mpath = out_dir / "metrics.tsv"
        fresh = resume_from is None or not mpath.exists()
        metrics = open(mpath, "w" if fresh else "a")
        if fresh:
            metrics.write(LOG_HEADER + "\n")
    end = config.steps if stop_at is None else min(stop_at, config.steps)
    history, skipped, bad = [], 0, 0
    try:
        while state.step < end:
            t0 = time.perf_counter()
            step = state.step
            batch = make_batch(config, step_seed(config.seed, step), generator)
            lr = lr_schedule(step, config.steps, config.warmup_frac, config.peak_lr)
            params.zero_grad()
            loss = batch_loss(params, batch)
            loss_value = loss.item()
            try:
                if not math.isfinite(loss_value):
                    raise NonFiniteUpdate("non-finite loss")
                ad.backward(loss)
                grads = {k: t.grad for k, t in params if t.grad is not None}
                grads, gnorm = clip_gradients(grads, config.clip_norm)
                muon_step(params, grads, state, lr, config.weight_decay, config)
                bad = 0
            except NonFiniteUpdate as exc:
                skipped += 1
                bad += 1
                gnorm = float("nan")
                log.warning("step %d skipped: %s", step, exc)
                if bad > config.max_bad_steps:
                    raise TrainingDiverged(
                        f"{bad} consecutive non-finite steps ending at step {step}; last loss {loss_value}, "
                        f"rows {batch.X.shape[1]}, features {batch.X.shape[2]}, tasks {batch.tasks}"
                    ) from exc
                # keep the schedule moving so later batches stay aligned with their step seeds
                state.step += 1
            rec = StepRecord(step, loss_value, len(batch.tasks) - batch.n_regression, batch.n_regression,
                             lr, gnorm, time.perf_counter() - t0)
            history.append(rec)
            if metrics is not None:
                metrics.write(rec.line() + "\n")
                metrics.flush()
                if state.step % config.checkpoint_every == 0 or state.step == end:
                    save_training_checkpoint(out_dir / "checkpoint.tdck", params, state, config)
            if step % 50 == 0:
                log.info("step %d loss %.4f lr %.2e |g| %.3f (%.2fs)", step, loss_value, lr, gnorm, rec.seconds)
    finally:
        if metrics is not None:
            metrics.close()
    return TrainResult(params, state, history, skipped)


def read_metrics(path) -> list[StepRecord]:
    rows = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            s, loss, nc, nr, lr, g, sec = line.rstrip("\n").split("\t")
            rows.append(StepRecord(int(s), float(loss), int(nc), int(nr), float(lr), float(g), float(sec)))
    return rows


def load_trained(path, dtype=None) -> ModelParams:
    params, _, _ = load_checkpoint(path, dtype)
    return params


__all__ = [
    "Batch", "NonFiniteUpdate", "OptState", "StepRecord", "TrainConfig", "TrainResult", "TrainingDiverged",
    "batch_loss", "clip_gradients", "cross_entropy", "is_muon_param", "lr_schedule", "load_trained",
    "load_training_checkpoint", "make_batch", "muon_step", "newton_schulz", "pinball_loss", "read_metrics",
    "save_training_checkpoint", "step_seed", "train", "warmup_steps",
]
