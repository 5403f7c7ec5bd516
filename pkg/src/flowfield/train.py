"""Optimization loop: AdamW, cosine learning-rate schedule, gradient clipping,
periodic evaluation and FFCK checkpoint persistence."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .data import FieldDataset, Stats
from .errors import (ConfigError, ContractError, CorruptionError,
                     DivergenceError, FormatError)
from .flowmatch import fm_loss
from .models import ModelConfig, build_model, model_config_from_dict
from .rng import make_rng
from .tensor import Tensor, zero_grads

FFCK_MAGIC = b"FFCK"
FFCK_VERSION = 1


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 32
    lr_max: float = 2e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-2
    max_grad_norm: float = 1.0
    p_drop: float = 0.2
    seed: int = 0
    eval_every: int = 1000
    checkpoint_every: int = 0      # 0 disables periodic checkpoints
    log_every: int = 50
    # pointwise MLP baseline (epoch-based Adam with step decay)
    optimizer: str = "adamw"       # adamw | adam
    lr_decay: float = 0.99
    epochs: int = 58

    def validate(self):
        if self.lr_min > self.lr_max:
            raise ConfigError("lr_min must be <= lr_max")
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("batch_size and steps must be >= 1")
        return self


AIRFOIL_FLOW_TRAIN = TrainConfig(steps=200000, batch_size=64)
AIRCRAFT_FLOW_TRAIN = TrainConfig(steps=300000, batch_size=32)
AIRFOIL_MLP_TRAIN = TrainConfig(optimizer="adam", lr_max=1.47e-3, lr_min=0.0,
                                weight_decay=0.0, lr_decay=0.99, batch_size=177,
                                epochs=58)
SYNTH_TRAIN = TrainConfig(steps=5000, batch_size=32, eval_every=1000)

TRAIN_PRESETS = {
    "airfoil-flow": AIRFOIL_FLOW_TRAIN,
    "aircraft-flow": AIRCRAFT_FLOW_TRAIN,
    "airfoil-mlp": AIRFOIL_MLP_TRAIN,
    "synth-small": SYNTH_TRAIN,
}


def train_config_from_dict(d: dict) -> TrainConfig:
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**d).validate()


# -- optimizer -----------------------------------------------------------------

def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
               step_index: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               wd: float = 0.0):
    """One decoupled-weight-decay Adam update; returns (param, m, v)."""
    b1, b2 = betas
    if wd:
        param = param - lr * wd * param
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** step_index)
    v_hat = v / (1.0 - b2 ** step_index)
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param.astype(grad.dtype), m, v


class AdamW:
    """Stateful wrapper over adamw_step for a named parameter set."""

    def __init__(self, named_params, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_index = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.step_index += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            p.data, self.m[name], self.v[name] = adamw_step(
                p.data, p.grad, self.m[name], self.v[name], self.step_index,
                lr, self.betas, self.eps, self.weight_decay)


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing with no warmup; clamps to lr_min past the end."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if step >= total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def clip_grad_norm(grads, max_norm: float):
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds
    max_norm; returns (grads, observed norm)."""
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    sq = sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = np.float32(max_norm / norm)
        grads = [g * scale for g in grads]
    return grads, norm


# -- checkpoints ----------------------------------------------------------------

@dataclass
class Checkpoint:
    meta: dict                       # model/train configs, stats, step, data section
    tensors: dict                    # name -> float32 ndarray (params + optimizer moments)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    names = list(ckpt.tensors)
    if len(set(names)) != len(names):
        raise CorruptionError("duplicate tensor names")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", FFCK_MAGIC, FFCK_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(ckpt.tensors[name], dtype=np.float32)
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0

    def need(n, what):
        nonlocal pos
        if len(raw) < pos + n:
            raise CorruptionError(f"truncated file: {what} needs {n} bytes at offset {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if len(raw) < 8:
        raise FormatError("file too short for an FFCK header")
    magic, version = struct.unpack("<4sI", need(8, "header"))
    if magic != FFCK_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FFCK_MAGIC!r}")
    if version != FFCK_VERSION:
        raise FormatError(f"unsupported FFCK version {version}")
    (blob_len,) = struct.unpack("<Q", need(8, "config length"))
    meta = json.loads(need(blob_len, "config blob").decode("utf-8"))
    (count,) = struct.unpack("<I", need(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2, "name length"))
        name = need(name_len, "name").decode("utf-8")
        if name in tensors:
            raise CorruptionError(f"tensor name collision: {name}")
        (rank,) = struct.unpack("<I", need(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", need(8 * rank, "dims"))
        n_el = int(np.prod(dims)) if rank else 1
        payload = need(4 * n_el, f"tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if pos != len(raw):
        raise CorruptionError(f"{len(raw) - pos} trailing bytes at offset {pos}")
    return Checkpoint(meta=meta, tensors=tensors)


def make_checkpoint(model, model_cfg: ModelConfig, train_cfg: TrainConfig,
                    step: int, optimizer: AdamW | None = None,
                    channel_stats: Stats | None = None,
                    condition_stats: Stats | None = None,
                    data_section: dict | None = None) -> Checkpoint:
    meta = {
        "model": asdict(model_cfg),
        "train": asdict(train_cfg),
        "step": step,
        "stats": {
            "channel": channel_stats.to_lists() if channel_stats else None,
            "condition": condition_stats.to_lists() if condition_stats else None,
        },
        "data": data_section or {},
    }
    tensors = {name: p.data for name, p in model.named_parameters()}
    if optimizer is not None:
        for name in optimizer.params:
            tensors[f"opt.m.{name}"] = optimizer.m[name]
            tensors[f"opt.v.{name}"] = optimizer.v[name]
    return Checkpoint(meta=meta, tensors=tensors)


def restore_model(ckpt: Checkpoint):
    """Rebuild the model described by a checkpoint and load its parameters."""
    cfg = model_config_from_dict(ckpt.meta["model"])
    model = build_model(cfg, seed=ckpt.meta.get("train", {}).get("seed", 0))
    for name, p in model.named_parameters():
        if name not in ckpt.tensors:
            raise CorruptionError(f"checkpoint missing parameter {name}")
        if ckpt.tensors[name].shape != p.data.shape:
            raise CorruptionError(
                f"parameter {name}: checkpoint shape {ckpt.tensors[name].shape} "
                f"!= model shape {p.data.shape}")
        p.data = ckpt.tensors[name].copy()
    return model, cfg


def restore_stats(ckpt: Checkpoint):
    stats = ckpt.meta.get("stats", {})
    ch = Stats.from_lists(stats["channel"]) if stats.get("channel") else None
    co = Stats.from_lists(stats["condition"]) if stats.get("condition") else None
    return ch, co


# -- training loops -----------------------------------------------------------------

def train_loop(model, ds: FieldDataset, cfg: TrainConfig, model_cfg: ModelConfig,
               data_section: dict | None = None, on_checkpoint=None,
               log=None):
    """Flow-matching training on the standardized train split.

    Batches are drawn uniformly with replacement; every run with the same
    seed and config produces a bitwise-identical loss trace. Returns
    (checkpoint, trace) where trace rows are (step, loss, lr, grad_norm).
    """
    cfg.validate()
    if ds.channel_stats is None:
        raise ContractError("train_loop needs a standardized dataset")
    train_idx = ds.indices("train")
    if train_idx.size == 0:
        raise ContractError("training split is empty")
    val_idx = ds.indices("val")
    rng = make_rng(cfg.seed, stream=1)
    params = dict(model.named_parameters())
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    trace = []
    val_trace = []
    for step in range(1, cfg.steps + 1):
        batch = train_idx[rng.integers(0, train_idx.size, size=cfg.batch_size)]
        zero_grads(params.values())
        loss = fm_loss(model, ds.fields[batch], ds.conditions[batch], rng,
                       p_drop=cfg.p_drop)
        loss_val = loss.item()
        lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min)
        if not math.isfinite(loss_val):
            raise DivergenceError(
                f"non-finite loss at step {step} (lr={lr:.3e})")
        loss.backward()
        # A parameter may sit outside the recorded graph for one batch (e.g.
        # the null embedding when no row drops its condition); its gradient
        # is zero, not absent.
        grads = [params[k].grad if params[k].grad is not None
                 else np.zeros_like(params[k].data) for k in params]
        clipped, norm = clip_grad_norm(grads, cfg.max_grad_norm)
        for k, g in zip(params, clipped):
            params[k].grad = g
        opt.step(lr)
        if (cfg.log_every and step % cfg.log_every == 0) or step == 1 or step == cfg.steps:
            trace.append((step, loss_val, lr, norm))
            if log:
                log(f"step {step}/{cfg.steps} loss {loss_val:.6f} lr {lr:.3e} gnorm {norm:.3f}")
        if cfg.eval_every and val_idx.size and step % cfg.eval_every == 0:
            vrng = make_rng(cfg.seed, stream=100000 + step)
            with_val = fm_loss(model, ds.fields[val_idx], ds.conditions[val_idx],
                               vrng, p_drop=0.0)
            val_trace.append((step, with_val.item()))
            if log:
                log(f"step {step}: val flow loss {with_val.item():.6f}")
        if on_checkpoint and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            on_checkpoint(step, make_checkpoint(
                model, model_cfg, cfg, step, opt, ds.channel_stats,
                ds.condition_stats, data_section))
    ckpt = make_checkpoint(model, model_cfg, cfg, cfg.steps, opt,
                           ds.channel_stats, ds.condition_stats, data_section)
    return ckpt, trace, val_trace


def pointwise_inputs(ds: FieldDataset, idx: np.ndarray):
    """Flatten (condition, point) pairs into MLP regression rows."""
    if ds.coords is None:
        raise ContractError("pointwise training requires coordinates")
    m = idx.size
    n = ds.num_points
    coords = np.broadcast_to(ds.coords[None, :, :], (m, n, ds.coords.shape[1]))
    conds = np.broadcast_to(ds.conditions[idx][:, None, :], (m, n, ds.cond_dim))
    inputs = np.concatenate([coords, conds], axis=-1).reshape(m * n, -1)
    targets = ds.fields[idx].transpose(0, 2, 1).reshape(m * n, ds.num_channels)
    return inputs.astype(np.float32), targets.astype(np.float32)


def train_mlp_baseline(model, ds: FieldDataset, cfg: TrainConfig,
                       model_cfg: ModelConfig, data_section: dict | None = None,
                       log=None):
    """Epoch-based pointwise regression: Adam, MSE loss, per-epoch step decay."""
    cfg.validate()
    if ds.channel_stats is None:
        raise ContractError("baseline training needs a standardized dataset")
    inputs, targets = pointwise_inputs(ds, ds.indices("train"))
    n_rows = inputs.shape[0]
    rng = make_rng(cfg.seed, stream=2)
    params = dict(model.named_parameters())
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    trace = []
    lr = cfg.lr_max
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n_rows)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n_rows, cfg.batch_size):
            rows = perm[start:start + cfg.batch_size]
            zero_grads(params.values())
            pred = model(Tensor(inputs[rows]), training=True, rng=rng)
            diff = pred - Tensor(targets[rows])
            loss = (diff * diff).mean()
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise DivergenceError(f"non-finite loss in epoch {epoch} (lr={lr:.3e})")
            loss.backward()
            opt.step(lr)
            step += 1
            epoch_loss += loss_val
            n_batches += 1
        trace.append((epoch, epoch_loss / n_batches, lr))
        if log:
            log(f"epoch {epoch}/{cfg.epochs} loss {epoch_loss / n_batches:.6f} lr {lr:.3e}")
        lr *= cfg.lr_decay
    ckpt = make_checkpoint(model, model_cfg, cfg, step, opt,
                           ds.channel_stats, ds.condition_stats, data_section)
    return ckpt, trace


def trace_csv(trace) -> str:
    lines = ["step,loss,lr,grad_norm"]
    for row in trace:
        lines.append(",".join(repr(float(v)) if isinstance(v, float) else str(v)
                              for v in row))
    return "\n".join(lines) + "\n"
