"""Seed derivation and platform-stable random draws.

Every random quantity in the pipeline comes from a Philox generator keyed by a
64-bit seed, and every seed is derived from the master seed plus a stage label.
Gaussians are produced with Box-Muller on top of Philox uniforms so the bit
pattern does not depend on numpy's sampler internals.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def splitmix64(state: int) -> int:
    """One SplitMix64 output for the given state (state is advanced once)."""
    z = (state + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, stage: str) -> int:
    return splitmix64((master & MASK64) ^ fnv1a64(stage))


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed & MASK64))


def uniform(rng: np.random.Generator, size=None) -> np.ndarray:
    return rng.random(size)


def normal(rng: np.random.Generator, size) -> np.ndarray:
    """Standard normal draws via Box-Muller."""
    shape = (size,) if isinstance(size, int) else tuple(size)
    n = int(np.prod(shape))
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]
    u2 = rng.random(m)
    rad = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    out = np.empty(2 * m)
    out[0::2] = rad * np.cos(ang)
    out[1::2] = rad * np.sin(ang)
    return out[:n].reshape(shape)
