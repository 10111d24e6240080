"""SplitMix64 random generator.

Every consumer receives an explicit generator; there is no module-level state.
Bulk draws are vectorised: SplitMix64 advances its state by a fixed increment,
so the next ``n`` outputs are ``mix(state + k * GOLDEN)`` for ``k = 1..n``.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int | None = None) -> np.ndarray | int:
        count = 1 if n is None else int(n)
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _GOLDEN
            out = _mix(z)
        self.state = (self.state + count * int(_GOLDEN)) & _MASK
        return int(out[0]) if n is None else out

    def spawn(self, *keys: int) -> "SplitMix64":
        """Child generator keyed by integers; does not advance this generator."""
        state = self.state
        for key in keys:
            z = ((state ^ (int(key) & _MASK)) + int(_GOLDEN)) & _MASK
            with np.errstate(over="ignore"):
                state = int(_mix(np.array([z], dtype=np.uint64))[0])
        return SplitMix64(state)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None) -> np.ndarray | float:
        """Standard normal draws (Box-Muller)."""
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(size=m)  # (0, 1]
        u2 = self.uniform(size=m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high)."""
        n = 1 if size is None else int(np.prod(size))
        span = np.uint64(high - low)
        out = (self.next_u64(n) % span).astype(np.int64) + low
        return int(out[0]) if size is None else out.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")
