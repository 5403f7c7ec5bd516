"""Velocity-field architectures: 1D U-Net, diffusion transformer with 1D
patchification, and the pointwise MLP baseline."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeMismatchError
from .nn import (DROPPED, ConditionEmbedder, Linear, Module, ModulationHead,
                 MultiHeadAttention, RMSNorm, SwiGLU, TimeEmbedding,
                 adaln_modulate, rms_norm, xavier_uniform)
from .rng import gaussian, make_rng, uniform
from .tensor import Tensor


@dataclass
class ModelConfig:
    architecture: str = "dit"          # unet1d | dit | mlp_baseline
    channels: int = 1
    points: int = 64
    cond_dim: int = 2
    embed_dim: int = 64                # conditioning embedding width
    p_drop: float = 0.2
    append_coords: bool = False        # feed coordinates as extra input channels
    coord_dim: int = 0
    # unet1d
    block_dims: list = field(default_factory=lambda: [32, 64])
    attn_heads: int = 4
    attn_hidden_dim: int = 64
    # dit
    num_blocks: int = 2
    num_heads: int = 4
    hidden_dim: int = 64
    patch_size: int = 1
    mlp_ratio: float = 2.5
    linear_attention: bool = False
    qk_norm: bool = False
    # mlp_baseline
    mlp_hidden_dim: int = 113
    mlp_num_layers: int = 10
    mlp_dropout: float = 7.76e-4

    def validate(self):
        if self.architecture not in ("unet1d", "dit", "mlp_baseline"):
            raise ConfigError(f"unknown architecture '{self.architecture}'")
        for name in ("channels", "points", "cond_dim", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.architecture == "dit":
            if self.points % self.patch_size:
                raise ConfigError(
                    f"points ({self.points}) must be divisible by patch size ({self.patch_size})")
        if self.architecture == "unet1d":
            down = 2 ** (len(self.block_dims) - 1)
            if self.points % down:
                raise ConfigError(
                    f"points ({self.points}) must be divisible by {down} for a "
                    f"{len(self.block_dims)}-level U-Net; pad the field to a multiple of {down}")
        return self


# Published presets (architecture tables), field-for-field.
AIRFOIL_UNET = ModelConfig(
    architecture="unet1d", channels=1, points=704, cond_dim=2, embed_dim=512,
    p_drop=0.2, block_dims=[128, 256, 512], attn_heads=8, attn_hidden_dim=512)

AIRFOIL_DIT = ModelConfig(
    architecture="dit", channels=1, points=691, cond_dim=2, embed_dim=128,
    p_drop=0.2, num_blocks=6, num_heads=4, hidden_dim=128, patch_size=1,
    mlp_ratio=2.5, linear_attention=False, qk_norm=False)

AIRCRAFT_DIT = ModelConfig(
    architecture="dit", channels=4, points=260774, cond_dim=3, embed_dim=256,
    p_drop=0.2, num_blocks=12, num_heads=8, hidden_dim=256, patch_size=1,
    mlp_ratio=4.0, linear_attention=True, qk_norm=True)

AIRFOIL_MLP = ModelConfig(
    architecture="mlp_baseline", channels=1, points=691, cond_dim=2,
    coord_dim=1, mlp_hidden_dim=113, mlp_num_layers=10, mlp_dropout=7.76e-4)

SYNTH_DIT = ModelConfig(
    architecture="dit", channels=1, points=64, cond_dim=2, embed_dim=64,
    p_drop=0.2, num_blocks=2, num_heads=4, hidden_dim=64, patch_size=1,
    mlp_ratio=2.5)

SYNTH_UNET = ModelConfig(
    architecture="unet1d", channels=1, points=64, cond_dim=2, embed_dim=128,
    p_drop=0.2, block_dims=[32, 64], attn_heads=4, attn_hidden_dim=64)

SYNTH_MLP = replace(AIRFOIL_MLP, points=64)

MODEL_PRESETS = {
    "airfoil-unet": AIRFOIL_UNET,
    "airfoil-dit": AIRFOIL_DIT,
    "aircraft-dit": AIRCRAFT_DIT,
    "airfoil-mlp": AIRFOIL_MLP,
    "synth-dit": SYNTH_DIT,
    "synth-unet": SYNTH_UNET,
    "synth-mlp": SYNTH_MLP,
}


def model_config_from_dict(d: dict) -> ModelConfig:
    known = set(ModelConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**d).validate()


# -- patchify -------------------------------------------------------------------

def patch_tokens(x: Tensor, p: int) -> Tensor:
    """Group p consecutive points across all channels: [B, C, N] -> [B, N/p, p*C]."""
    b, c, n = x.shape
    if n % p:
        raise ConfigError(f"points ({n}) not divisible by patch size ({p})")
    return x.transpose((0, 2, 1)).reshape((b, n // p, p * c))


def unpatch_tokens(x: Tensor, p: int, channels: int) -> Tensor:
    """Inverse of patch_tokens: [B, N/p, p*C] -> [B, C, N]."""
    b, ntok, raw = x.shape
    if raw != p * channels:
        raise ShapeMismatchError(f"token width {raw} != patch_size*channels {p * channels}")
    return x.reshape((b, ntok * p, channels)).transpose((0, 2, 1))


class Patchify(Module):
    def __init__(self, channels: int, p: int, dim: int, rng):
        self.p = p
        self.channels = channels
        self.proj = Linear(p * channels, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(patch_tokens(x, self.p))


class Unpatchify(Module):
    """Zero-initialized projection back to the field so the network output is
    exactly zero at initialization."""

    def __init__(self, channels: int, p: int, dim: int):
        self.p = p
        self.channels = channels
        self.proj = Linear(dim, p * channels, rng=None, init="zeros")

    def __call__(self, tokens: Tensor) -> Tensor:
        return unpatch_tokens(self.proj(tokens), self.p, self.channels)


# -- diffusion transformer ---------------------------------------------------------

class DiTBlock(Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, cond_dim: int,
                 rng, linear_attn: bool, qk_norm: bool):
        self.attn = MultiHeadAttention(dim, num_heads, rng, linear_attn=linear_attn,
                                       qk_norm=qk_norm)
        hidden = round(mlp_ratio * dim)
        self.ff = SwiGLU(dim, hidden, rng)
        self.mod = ModulationHead(cond_dim, dim, 6)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        b1, g1, a1, b2, g2, a2 = self.mod(cond)
        x = x + adaln_modulate(x, b1, g1, a1, self.attn)
        x = x + adaln_modulate(x, b2, g2, a2, self.ff)
        return x


class DiT(Module):
    """Transformer velocity field over patchified 1D point sequences."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = make_rng(seed, stream=101)
        d = cfg.hidden_dim
        in_channels = cfg.channels + (cfg.coord_dim if cfg.append_coords else 0)
        self.in_channels = in_channels
        ntok = cfg.points // cfg.patch_size
        self.patchify = Patchify(in_channels, cfg.patch_size, d, rng)
        self.pos_emb = Tensor(0.02 * gaussian((ntok, d), rng, dtype=np.float32),
                              requires_grad=True)
        self.time_emb = TimeEmbedding(cfg.embed_dim, rng)
        self.cond_emb = ConditionEmbedder(cfg.cond_dim, cfg.embed_dim, rng)
        self.blocks = [
            DiTBlock(d, cfg.num_heads, cfg.mlp_ratio, cfg.embed_dim, rng,
                     cfg.linear_attention, cfg.qk_norm)
            for _ in range(cfg.num_blocks)
        ]
        self.final_mod = ModulationHead(cfg.embed_dim, d, 2)
        self.unpatchify = Unpatchify(cfg.channels, cfg.patch_size, d)

    def __call__(self, z: Tensor, t, c, drop_mask=None, coords=None) -> Tensor:
        z = T.as_tensor(z)
        squeeze = z.ndim == 2
        if squeeze:
            z = z.reshape((1,) + z.shape)
        if self.cfg.append_coords:
            if coords is None:
                raise ConfigError("model configured with append_coords but no coords given")
            ct = T.as_tensor(coords).transpose((1, 0)).reshape(
                (1, self.cfg.coord_dim, self.cfg.points))
            ct = Tensor(np.broadcast_to(ct.data, (z.shape[0],) + ct.shape[1:]).copy())
            z = T.concat([z, ct], axis=1)
        if z.shape[1:] != (self.in_channels, self.cfg.points):
            raise ShapeMismatchError(
                f"input shape {z.shape[1:]} != ({self.in_channels}, {self.cfg.points})")
        b = z.shape[0]
        cond = self.time_emb(np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)))
        if c is DROPPED:
            cond = cond + self.cond_emb.null_embedding.reshape((1, -1))
        else:
            cond = cond + self.cond_emb(c, drop_mask)
        x = self.patchify(z) + self.pos_emb
        for block in self.blocks:
            x = block(x, cond)
        bf, gf = self.final_mod(cond)
        shape = (bf.shape[0], 1, bf.shape[-1])
        x = rms_norm(x) * (1.0 + gf.reshape(shape)) + bf.reshape(shape)
        out = self.unpatchify(x)
        return out.reshape(out.shape[1:]) if squeeze else out


# -- 1D U-Net -------------------------------------------------------------------------

class Conv1d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng, stride: int = 1,
                 padding: int = 0, init: str = "xavier"):
        self.stride = stride
        self.padding = padding
        if init == "zeros":
            w = np.zeros((out_ch, in_ch, k), dtype=np.float32)
        else:
            bound = np.sqrt(6.0 / (in_ch * k + out_ch * k))
            w = uniform((out_ch, in_ch, k), rng, -bound, bound)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv1d(x, self.weight, stride=self.stride, padding=self.padding)
        return out + self.bias.reshape((1, -1, 1))


def _channels_rms(x: Tensor, gain: Tensor | None = None) -> Tensor:
    """RMS-normalize the channel axis of [B, C, N] data."""
    y = x.transpose((0, 2, 1))
    y = rms_norm(y, gain)
    return y.transpose((0, 2, 1))


class UNetResBlock(Module):
    """adaLN-Zero-modulated residual unit of two k=3 convolutions."""

    def __init__(self, in_ch: int, out_ch: int, cond_dim: int, rng):
        self.conv1 = Conv1d(in_ch, out_ch, 3, rng, padding=1)
        self.conv2 = Conv1d(out_ch, out_ch, 3, rng, padding=1)
        self.mod_shift_scale = ModulationHead(cond_dim, in_ch, 2)
        self.mod_gate = ModulationHead(cond_dim, out_ch, 1)
        self.skip = Conv1d(in_ch, out_ch, 1, rng) if in_ch != out_ch else None

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        beta, gamma = self.mod_shift_scale(cond)
        (alpha,) = self.mod_gate(cond)
        b = beta.shape[0]
        h = _channels_rms(x) * (1.0 + gamma.reshape((b, -1, 1))) + beta.reshape((b, -1, 1))
        h = self.conv2(T.silu(self.conv1(h)))
        res = self.skip(x) if self.skip is not None else x
        return res + alpha.reshape((b, -1, 1)) * h


class UNetAttention(Module):
    """Token attention over points, gated by adaLN-Zero."""

    def __init__(self, ch: int, heads: int, hidden: int, cond_dim: int, rng):
        self.attn = MultiHeadAttention(ch, heads, rng, inner_dim=hidden)
        self.mod = ModulationHead(cond_dim, ch, 3)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        beta, gamma, alpha = self.mod(cond)
        tokens = x.transpose((0, 2, 1))  # [B, N, C]
        branch = adaln_modulate(tokens, beta, gamma, alpha, self.attn)
        return x + branch.transpose((0, 2, 1))


class UNet1d(Module):
    """Encoder-decoder over 1D fields with skip connections; attention at the
    two deepest levels; zero-initialized output head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = make_rng(seed, stream=102)
        dims = list(cfg.block_dims)
        levels = len(dims)
        attn_levels = set(range(max(0, levels - 2), levels))
        in_channels = cfg.channels + (cfg.coord_dim if cfg.append_coords else 0)
        self.in_channels = in_channels
        self.stem = Conv1d(in_channels, dims[0], 3, rng, padding=1)
        # convolutions are translation-equivariant and the modulation signal is
        # per-channel, so a learned per-point table is the only positional cue
        self.pos_emb = Tensor(
            0.02 * gaussian((dims[0], cfg.points), rng, dtype=np.float32),
            requires_grad=True)
        self.time_emb = TimeEmbedding(cfg.embed_dim, rng)
        self.cond_emb = ConditionEmbedder(cfg.cond_dim, cfg.embed_dim, rng)

        self.enc_blocks = []
        self.enc_attn = []
        self.downs = []
        for i, d in enumerate(dims):
            self.enc_blocks.append(UNetResBlock(d, d, cfg.embed_dim, rng))
            self.enc_blocks.append(UNetResBlock(d, d, cfg.embed_dim, rng))
            self.enc_attn.append(
                UNetAttention(d, cfg.attn_heads, cfg.attn_hidden_dim, cfg.embed_dim, rng)
                if i in attn_levels else None)
            if i < levels - 1:
                self.downs.append(Conv1d(d, dims[i + 1], 3, rng, stride=2, padding=1))

        self.dec_blocks = []
        self.dec_attn = []
        self.ups = []
        for i in range(levels - 2, -1, -1):
            self.ups.append(Conv1d(dims[i + 1], dims[i], 3, rng, padding=1))
            self.dec_blocks.append(UNetResBlock(2 * dims[i], dims[i], cfg.embed_dim, rng))
            self.dec_blocks.append(UNetResBlock(dims[i], dims[i], cfg.embed_dim, rng))
            self.dec_attn.append(
                UNetAttention(dims[i], cfg.attn_heads, cfg.attn_hidden_dim, cfg.embed_dim, rng)
                if i in attn_levels else None)
        self.head = Conv1d(dims[0], cfg.channels, 1, rng, init="zeros")

    def __call__(self, z: Tensor, t, c, drop_mask=None, coords=None) -> Tensor:
        z = T.as_tensor(z)
        squeeze = z.ndim == 2
        if squeeze:
            z = z.reshape((1,) + z.shape)
        if self.cfg.append_coords:
            if coords is None:
                raise ConfigError("model configured with append_coords but no coords given")
            ct = T.as_tensor(coords).transpose((1, 0)).reshape(
                (1, self.cfg.coord_dim, self.cfg.points))
            ct = Tensor(np.broadcast_to(ct.data, (z.shape[0],) + ct.shape[1:]).copy())
            z = T.concat([z, ct], axis=1)
        if z.shape[1:] != (self.in_channels, self.cfg.points):
            raise ShapeMismatchError(
                f"input shape {z.shape[1:]} != ({self.in_channels}, {self.cfg.points})")
        b = z.shape[0]
        cond = self.time_emb(np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)))
        if c is DROPPED:
            cond = cond + self.cond_emb.null_embedding.reshape((1, -1))
        else:
            cond = cond + self.cond_emb(c, drop_mask)

        levels = len(self.cfg.block_dims)
        x = self.stem(z) + self.pos_emb
        skips = []
        for i in range(levels):
            x = self.enc_blocks[2 * i](x, cond)
            x = self.enc_blocks[2 * i + 1](x, cond)
            if self.enc_attn[i] is not None:
                x = self.enc_attn[i](x, cond)
            skips.append(x)
            if i < levels - 1:
                x = self.downs[i](x)
        for j, i in enumerate(range(levels - 2, -1, -1)):
            x = self.ups[j](T.repeat_last(x, 2))
            x = T.concat([x, skips[i]], axis=1)
            x = self.dec_blocks[2 * j](x, cond)
            x = self.dec_blocks[2 * j + 1](x, cond)
            if self.dec_attn[j] is not None:
                x = self.dec_attn[j](x, cond)
        out = self.head(x)
        return out.reshape(out.shape[1:]) if squeeze else out


# -- pointwise MLP baseline --------------------------------------------------------------

class MLPBaseline(Module):
    """Pointwise regressor: (coords, condition) -> field value. Uniform-width
    ELU stack, Xavier-uniform init, dropout after each hidden layer."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = make_rng(seed, stream=103)
        in_dim = cfg.coord_dim + cfg.cond_dim
        dims = [in_dim] + [cfg.mlp_hidden_dim] * cfg.mlp_num_layers
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]
        self.out = Linear(cfg.mlp_hidden_dim, cfg.channels, rng)
        self.dropout_p = cfg.mlp_dropout

    def __call__(self, inputs: Tensor, training: bool = False, rng=None) -> Tensor:
        x = T.as_tensor(inputs)
        for layer in self.layers:
            x = T.elu(layer(x))
            if training and self.dropout_p > 0:
                if rng is None:
                    raise ConfigError("dropout in training mode needs an rng")
                mask = (rng.random(x.shape) >= self.dropout_p).astype(np.float32)
                x = x * Tensor(mask / (1.0 - self.dropout_p))
        return self.out(x)


def build_model(cfg: ModelConfig, seed: int = 0) -> Module:
    cfg.validate()
    if cfg.architecture == "dit":
        return DiT(cfg, seed)
    if cfg.architecture == "unet1d":
        return UNet1d(cfg, seed)
    return MLPBaseline(cfg, seed)


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
