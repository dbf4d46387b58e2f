"""Deterministic seed derivation for nested stochastic stages.

Every stochastic component takes an explicit integer seed; child seeds are
derived by mixing the parent seed with integer tags (tree index, LOO row,
learner index, ...) so results are independent of scheduling order.
"""

from __future__ import annotations

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def mix_seed(*parts: int) -> int:
    """Mix integer parts into a single 63-bit seed, order-sensitive."""
    acc = 0x6A09E667F3BCC908
    for p in parts:
        acc = splitmix64(acc ^ (int(p) & _MASK64))
    return acc & 0x7FFFFFFFFFFFFFFF


def rng_for(*parts: int) -> np.random.Generator:
    return np.random.default_rng(mix_seed(*parts))
