"""Neural building blocks: normalization, gated feed-forward, attention
variants, time/condition embeddings and adaLN-Zero modulation."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatchError
from .rng import gaussian, uniform
from .tensor import EPS, Tensor

# Sentinel for a dropped condition (the learned null-condition path).
DROPPED = object()


# -- parameter containers -----------------------------------------------------

class Module:
    """Minimal parameter container with recursive named access."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def to_dtype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def xavier_uniform(fan_in: int, fan_out: int, rng, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return uniform((fan_in, fan_out), rng, -bound, bound, dtype)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng=None, bias: bool = True,
                 init: str = "xavier"):
        if init == "zeros":
            w = np.zeros((in_dim, out_dim), dtype=np.float32)
        elif init == "xavier":
            w = xavier_uniform(in_dim, out_dim, rng)
        else:
            raise ConfigError(f"unknown init '{init}'")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        h = T.matmul(x.reshape((-1, x.shape[-1])), self.weight)
        if self.bias is not None:
            h = h + self.bias
        return h.reshape(lead + (self.weight.shape[1],))


# -- normalization --------------------------------------------------------------

def rms_norm(x: Tensor, gain: Tensor | None = None, eps: float = EPS) -> Tensor:
    """y = gain * x / sqrt(mean(x^2) + eps) along the last axis."""
    y = T.rms_normalize(x, eps)
    if gain is not None:
        y = y * gain
    return y


class RMSNorm(Module):
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return rms_norm(x, self.gain)


# -- feed-forward ----------------------------------------------------------------

def swiglu(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    lead = x.shape[:-1]
    xf = x.reshape((-1, x.shape[-1]))
    h = T.silu(T.matmul(xf, w_gate)) * T.matmul(xf, w_up)
    return T.matmul(h, w_down).reshape(lead + (w_down.shape[1],))


class SwiGLU(Module):
    """Gated feed-forward: (SiLU(x Wg) * (x Wu)) Wd, no biases."""

    def __init__(self, dim: int, hidden: int, rng):
        self.w_gate = Tensor(xavier_uniform(dim, hidden, rng), requires_grad=True)
        self.w_up = Tensor(xavier_uniform(dim, hidden, rng), requires_grad=True)
        self.w_down = Tensor(xavier_uniform(hidden, dim, rng), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return swiglu(x, self.w_gate, self.w_up, self.w_down)


# -- attention ---------------------------------------------------------------------

def softmax_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the last two axes [..., N, d_h]."""
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ShapeMismatchError(f"attention shapes mismatch: {q.shape}, {k.shape}, {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.matmul(q, T.transpose(k, _swap_last(q.ndim))) * scale
    return T.matmul(T.softmax(scores, axis=-1), v)


def linear_attention(q: Tensor, k: Tensor, v: Tensor, eps: float = EPS) -> Tensor:
    """ReLU-feature-map attention; the K-V context product is computed first
    so cost is linear in sequence length."""
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ShapeMismatchError(f"attention shapes mismatch: {q.shape}, {k.shape}, {v.shape}")
    fq = T.relu(q)
    fk = T.relu(k)
    context = T.matmul(T.transpose(fk, _swap_last(k.ndim)), v)  # [..., d_h, d_v]
    numer = T.matmul(fq, context)                                # [..., N, d_v]
    denom = fk.sum(axis=-2, keepdims=True)                       # [..., 1, d_h]
    denom = T.matmul(fq, T.transpose(denom, _swap_last(k.ndim)))  # [..., N, 1]
    return numer / (denom + eps)


def _swap_last(ndim: int):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class MultiHeadAttention(Module):
    """Multi-head self-attention over token sequences [B, N, d].

    `inner_dim` sets the total width of the Q/K/V projections (defaults to d).
    The output projection is zero-initialized so the block is inert inside a
    residual stream at initialization.
    """

    def __init__(self, dim: int, num_heads: int, rng, linear_attn: bool = False,
                 qk_norm: bool = False, inner_dim: int | None = None):
        inner_dim = inner_dim or dim
        if inner_dim % num_heads:
            raise ConfigError(f"attention width {inner_dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = inner_dim // num_heads
        self.linear_attn = linear_attn
        self.proj_qkv = Linear(dim, 3 * inner_dim, rng, bias=False)
        self.proj_out = Linear(inner_dim, dim, rng, bias=False, init="zeros")
        self.qk_norm = qk_norm
        if qk_norm:
            self.q_gain = Tensor(np.ones(self.head_dim, dtype=np.float32), requires_grad=True)
            self.k_gain = Tensor(np.ones(self.head_dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h, dh = self.num_heads, self.head_dim
        qkv = self.proj_qkv(x)  # [B, N, 3*inner]
        qkv = qkv.reshape((b, n, 3, h, dh)).transpose((2, 0, 3, 1, 4))  # [3, B, H, N, dh]
        q, k, v = qkv[0], qkv[1], qkv[2]
        if self.qk_norm:
            q = rms_norm(q, self.q_gain)
            k = rms_norm(k, self.k_gain)
        if self.linear_attn:
            out = linear_attention(q, k, v)
        else:
            out = softmax_attention(q, k, v)
        out = out.transpose((0, 2, 1, 3)).reshape((b, n, h * dh))
        return self.proj_out(out)


# -- embeddings ---------------------------------------------------------------------

TIME_FREQ_BASE = 10000.0
TIME_SCALE = 1000.0


def time_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of the flow time t in [0, 1]; t maps onto the
    integer-timestep range via a fixed factor of 1000."""
    if dim % 2:
        raise ConfigError(f"time embedding dimension must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = TIME_FREQ_BASE ** (-2.0 * np.arange(half) / dim)
    ang = t[:, None] * TIME_SCALE * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(np.float32)


class TimeEmbedding(Module):
    """Sinusoidal features followed by a two-layer SiLU perceptron."""

    def __init__(self, dim: int, rng):
        self.dim = dim
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def __call__(self, t) -> Tensor:
        feats = Tensor(time_features(t, self.dim))
        return self.fc2(T.silu(self.fc1(feats)))


class ConditionEmbedder(Module):
    """Two-layer SiLU perceptron for the condition vector, plus a learned
    null embedding substituted when the condition is dropped."""

    def __init__(self, cond_dim: int, dim: int, rng):
        self.cond_dim = cond_dim
        self.fc1 = Linear(cond_dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)
        self.null_embedding = Tensor(
            0.02 * gaussian((dim,), rng, dtype=np.float32), requires_grad=True)

    def __call__(self, c, drop_mask: np.ndarray | None = None) -> Tensor:
        """c: [B, K] array/Tensor, or DROPPED for an all-null batch of size 1.

        drop_mask marks batch rows whose condition is replaced by the null
        embedding (classifier-free training path).
        """
        if c is DROPPED:
            return self.null_embedding.reshape((1, -1))
        c = T.as_tensor(c)
        if c.ndim == 1:
            c = c.reshape((1, -1))
        if c.shape[-1] != self.cond_dim:
            raise ShapeMismatchError(
                f"condition dim {c.shape[-1]} != embedder dim {self.cond_dim}")
        emb = self.fc2(T.silu(self.fc1(c)))
        if drop_mask is not None and np.any(drop_mask):
            keep = Tensor(np.where(drop_mask, 0.0, 1.0).astype(np.float32).reshape(-1, 1))
            emb = emb * keep + self.null_embedding.reshape((1, -1)) * (1.0 - keep)
        return emb


# -- adaLN-Zero ---------------------------------------------------------------------

class ModulationHead(Module):
    """Zero-initialized linear map from the condition embedding to the
    (shift, scale, gate) coefficients of each modulated sub-block."""

    def __init__(self, cond_dim: int, dim: int, num_groups: int):
        self.dim = dim
        self.num_groups = num_groups
        self.proj = Linear(cond_dim, num_groups * dim, rng=None, init="zeros")

    def __call__(self, cond_emb: Tensor):
        out = self.proj(cond_emb)  # [B, num_groups * dim]
        return [out[:, i * self.dim:(i + 1) * self.dim] for i in range(self.num_groups)]


def adaln_modulate(x: Tensor, beta: Tensor, gamma: Tensor, alpha: Tensor, layer) -> Tensor:
    """Gated conditional branch: alpha * layer(rms_norm(x) * (1 + gamma) + beta).

    beta/gamma/alpha are [B, d] and broadcast over any middle axes of x.
    The caller adds the result to its residual stream; with zero-initialized
    heads (alpha = 0) the branch contributes nothing at initialization.
    """
    if x.ndim > 2:
        mid = (1,) * (x.ndim - 2)
        shape = (beta.shape[0],) + mid + (beta.shape[-1],)
        beta = beta.reshape(shape)
        gamma = gamma.reshape(shape)
        alpha = alpha.reshape(shape)
    h = rms_norm(x) * (1.0 + gamma) + beta
    return alpha * layer(h)
