"""Deterministic weight seeding.

All learnable-shaped parameters in this package (pooling MLP, sparse-conv
kernel, decoder heads, refiner MLPs) are either loaded from a weights file
or drawn from a splitmix64 stream so that every run of the pipeline is
bit-reproducible from a single integer seed.

splitmix64 constants (Steele et al., "Fast splittable pseudorandom number
generators"):
    GAMMA = 0x9E3779B97F4A7C15   increment per draw
    MIX1  = 0xBF58476D1CE4E5B9   first finalizer multiplier
    MIX2  = 0x94D049BB133111EB   second finalizer multiplier
"""

from __future__ import annotations

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

# FNV-1a 64-bit, used to fold string tags into seeds.
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, n: int) -> np.ndarray:
    """Return the first `n` raw 64-bit outputs of the splitmix64 stream."""
    with np.errstate(over="ignore"):
        states = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GAMMA * np.arange(
            1, n + 1, dtype=np.uint64
        )
        return _mix(states)


def uniform(seed: int, n: int) -> np.ndarray:
    """`n` doubles in [0, 1) from the splitmix64 stream for `seed`."""
    bits = splitmix64(seed, n)
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def symmetric(seed: int, shape: tuple[int, ...], scale: float) -> np.ndarray:
    """Array of doubles uniform in [-scale, scale), splitmix64-seeded."""
    n = int(np.prod(shape)) if shape else 1
    return ((uniform(seed, n) * 2.0 - 1.0) * scale).reshape(shape)


def derive_seed(base: int, tag: str) -> int:
    """Stable sub-seed for a named component of the pipeline.

    Folds the tag through FNV-1a, xors with the base seed and applies one
    splitmix64 finalizer round. Identical (base, tag) pairs always map to
    the same stream.
    """
    h = _FNV_OFFSET
    with np.errstate(over="ignore"):
        for byte in tag.encode("utf-8"):
            h = (h ^ np.uint64(byte)) * _FNV_PRIME
        mixed = _mix(np.uint64(base & 0xFFFFFFFFFFFFFFFF) ^ h)
    return int(mixed)
