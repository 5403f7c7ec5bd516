"""Deterministic random number generation.

All stochastic pieces of the pipeline (noise draws, batch sampling, condition
dropout, parameter init) go through a counter-based Philox generator so that
runs are bit-reproducible for a given seed. Gaussian samples are produced with
an explicit Box-Muller transform rather than the generator's built-in normal
so the byte stream only depends on the uniform stream.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator keyed by (seed, stream); distinct streams are independent."""
    key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def gaussian(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Standard normal samples via Box-Muller on the uniform stream."""
    n = int(np.prod(shape)) if shape else 1
    pairs = (n + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # in (0, 1]: safe for log
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return z[:n].reshape(shape).astype(dtype)


def uniform(shape, rng: np.random.Generator, low=0.0, high=1.0, dtype=np.float32) -> np.ndarray:
    return (low + (high - low) * rng.random(shape)).astype(dtype)
