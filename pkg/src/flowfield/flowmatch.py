"""Generative core: linear interpolation path, target velocity, rectified
flow loss, classifier-free guidance and Euler sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DomainError
from .nn import DROPPED
from .rng import gaussian, make_rng
from .tensor import Tensor, no_grad


@dataclass
class FlowState:
    """One point on the straight noise-to-data path: z = (1-t)*eps + t*x."""
    z: Tensor
    t: float
    eps: Tensor
    x: Tensor


@dataclass
class SamplerConfig:
    steps: int = 500
    guidance_scale: float = 2.0
    seed: int = 0

    def validate(self):
        if self.steps < 1:
            raise ConfigError(f"sampler steps must be >= 1, got {self.steps}")
        if self.guidance_scale < 0:
            raise ConfigError(f"guidance scale must be >= 0, got {self.guidance_scale}")
        return self


def interpolate(x, eps, t: float) -> FlowState:
    x = T.as_tensor(x)
    eps = T.as_tensor(eps)
    if x.shape != eps.shape:
        raise ContractError(f"x shape {x.shape} != eps shape {eps.shape}")
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"interpolation time must lie in [0, 1], got {t}")
    if t == 0.0:
        z = Tensor(eps.data.copy())
    elif t == 1.0:
        z = Tensor(x.data.copy())
    else:
        z = eps * (1.0 - t) + x * t
    return FlowState(z=z, t=t, eps=eps, x=x)


def target_velocity(state: FlowState) -> Tensor:
    """Constant slope of the straight path: x - eps, independent of t."""
    return state.x - state.eps


def fm_loss(model, x: np.ndarray, c: np.ndarray, rng: np.random.Generator,
            p_drop: float = 0.2) -> Tensor:
    """Rectified flow-matching loss over a batch.

    x: [B, C, N] fields, c: [B, K] conditions, both standardized. Per sample:
    t ~ U[0,1], eps ~ N(0,I), the condition is dropped with probability p_drop,
    and the loss is the mean squared deviation of the predicted velocity from
    x - eps over batch and coordinates.
    """
    x = np.asarray(x, dtype=np.float32)
    c = np.asarray(c, dtype=np.float32)
    if x.ndim != 3 or x.shape[0] == 0:
        raise ContractError(f"fm_loss expects a nonempty [B, C, N] batch, got {x.shape}")
    b = x.shape[0]
    t = rng.random(b).astype(np.float32)
    eps = gaussian(x.shape, rng)
    drop_mask = rng.random(b) < p_drop
    z = Tensor((1.0 - t)[:, None, None] * eps + t[:, None, None] * x)
    v_pred = model(z, t, c, drop_mask=drop_mask)
    diff = v_pred - Tensor(x - eps)
    return (diff * diff).mean()


def guided_velocity(model, z, t, c, s: float) -> Tensor:
    """Classifier-free guided velocity: v_null + s * (v_cond - v_null).

    One model evaluation when s == 1 (plain conditional sampling), two
    otherwise.
    """
    if s == 1.0:
        return model(z, t, c)
    v_null = model(z, t, DROPPED)
    if s == 0.0:
        return v_null
    v_cond = model(z, t, c)
    return v_null + (v_cond - v_null) * s


def euler_sample(model, c, cfg: SamplerConfig, shape=None) -> np.ndarray:
    """Integrate dz/dt = v(z, t, c) from z0 ~ N(0,I) with left-endpoint Euler.

    `shape` defaults to the model's (C, N) field shape. Deterministic given
    (weights, seed, steps, guidance scale).
    """
    cfg.validate()
    if shape is None:
        mcfg = model.cfg
        shape = (mcfg.channels, mcfg.points)
    z = gaussian(shape, make_rng(cfg.seed))
    dt = np.float32(1.0 / cfg.steps)
    with no_grad():
        for k in range(cfg.steps):
            t = np.float32(k / cfg.steps)
            v = guided_velocity(model, Tensor(z), t, c, cfg.guidance_scale)
            z = z + dt * v.data
    return z


def euler_sample_batch(model, conditions: np.ndarray, cfg: SamplerConfig,
                       shape=None, stream_offset: int = 0) -> np.ndarray:
    """Sample one field per condition row. Row i draws its initial noise from
    the stream (seed, stream_offset + i), so results are independent of batch
    composition and chunking."""
    cfg.validate()
    conditions = np.asarray(conditions, dtype=np.float32)
    if conditions.ndim != 2:
        raise ContractError(f"conditions must be [M, K], got {conditions.shape}")
    m = conditions.shape[0]
    if shape is None:
        mcfg = model.cfg
        shape = (mcfg.channels, mcfg.points)
    z = np.stack([gaussian(shape, make_rng(cfg.seed, stream=stream_offset + i))
                  for i in range(m)])
    dt = np.float32(1.0 / cfg.steps)
    with no_grad():
        for k in range(cfg.steps):
            t = np.float32(k / cfg.steps)
            v = guided_velocity(model, Tensor(z), t, conditions, cfg.guidance_scale)
            z = z + dt * v.data
    return z
