"""Seed splitting for reproducible per-frame random substreams.

A master seed and a frame index are mixed with the splitmix64 finalizer
(constants 0x9E3779B97F4A7C15, 0xBF58476D1CE4E5B9, 0x94D049BB133111EB) and
the result seeds a numpy ``Generator``. Draws are reproducible within one
numpy version; nothing here promises bit-identity across languages.
"""
import numpy as np

_MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    x = (x + GOLDEN) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def split_seed(master_seed: int, index: int) -> int:
    """64-bit substream seed for ``index`` under ``master_seed``."""
    return splitmix64((master_seed & _MASK) ^ splitmix64(index & _MASK))


def substream(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(split_seed(master_seed, index))
