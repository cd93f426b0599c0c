"""SplitMix64 counter-based generator.

Every random draw in the package goes through :class:`SplitMix64` so that
fixtures and oracle instances are reproducible from a single integer seed,
independent of numpy's bit-generator choices.  The generator is counter
based: the ``i``-th output is ``mix(seed + (i + 1) * GOLDEN)``, which lets us
produce large blocks with vectorized uint64 arithmetic.  ``split`` derives an
independent child stream from a string key.
"""

from __future__ import annotations

import hashlib

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """64-bit state generator; ``state`` advances by ``GOLDEN`` per output."""

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            counter = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + counter * GOLDEN
            out = _mix(z)
        self.state = (self.state + n * int(GOLDEN)) & _MASK
        return out

    def split(self, key: str) -> "SplitMix64":
        digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
        child = int.from_bytes(digest, "little") ^ int(self.next_u64(1)[0])
        return SplitMix64(child)

    # float draws ---------------------------------------------------------
    def uniform(self, low=0.0, high=1.0, size=()) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        # top 53 bits -> [0, 1)
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return (low + (high - low) * u).reshape(shape)

    def normal(self, loc=0.0, scale=1.0, size=()) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(size=m)  # (0, 1]
        u2 = self.uniform(size=m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return (loc + scale * z).reshape(shape)

    def integers(self, low: int, high: int, size=()) -> np.ndarray:
        """Uniform ints in ``[low, high)`` (modulo bias is negligible for small ranges)."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        span = np.uint64(high - low)
        return (self.next_u64(n) % span).astype(np.int64).reshape(shape) + low


def make_rng(seed: int, *keys: str) -> SplitMix64:
    rng = SplitMix64(seed)
    for key in keys:
        rng = rng.split(key)
    return rng
