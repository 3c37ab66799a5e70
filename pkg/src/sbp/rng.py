"""Counter-based SplitMix64 generator.

Every draw is a pure function of ``(seed, counter)``, so streams can be
reproduced exactly in any language that implements 64-bit wrapping
arithmetic::

    state_i = seed + (i + 1) * 0x9E3779B97F4A7C15          (mod 2**64)
    z = state_i
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9               (mod 2**64)
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB               (mod 2**64)
    z = z ^ (z >> 31)

Uniforms are ``((z >> 11) + 0.5) * 2**-53`` and therefore lie strictly
inside (0, 1).  Normals use Box-Muller on consecutive uniform pairs.
"""

from __future__ import annotations

import numpy as np

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_1 = 0xBF58476D1CE4E5B9
MIX_2 = 0x94D049BB133111EB

_MASK = (1 << 64) - 1


def splitmix64(seed: int, counters: np.ndarray) -> np.ndarray:
    """Hash ``counters`` (uint64 array of draw indices) under ``seed``."""
    counters = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK) + (counters + np.uint64(1)) * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_2)
        z = z ^ (z >> np.uint64(31))
    return z


class CounterRNG:
    """Sequential view over the SplitMix64 counter stream.

    The object only stores ``seed`` and the next counter value, so it can be
    snapshotted or re-created at any position with ``CounterRNG(seed, counter)``.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"CounterRNG(seed={self.seed}, counter={self.counter})"

    def raw(self, size: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + size, dtype=np.uint64)
        self.counter += size
        return splitmix64(self.seed, idx)

    def random(self, size: int | None = None) -> np.ndarray | float:
        """Uniform draws in the open interval (0, 1)."""
        n = 1 if size is None else int(size)
        z = self.raw(n)
        u = ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        return float(u[0]) if size is None else u

    def normal(self, size: int) -> np.ndarray:
        """Standard normals; consumes ``2 * ceil(size / 2)`` uniforms."""
        pairs = (size + 1) // 2
        u = self.random(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        out = np.empty((pairs, 2))
        out[:, 0] = radius * np.cos(angle)
        out[:, 1] = radius * np.sin(angle)
        return out.reshape(-1)[:size]

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")

    def spawn(self, offset: int) -> "CounterRNG":
        """Independent child stream for a consumer identified by ``offset``."""
        child = splitmix64(self.seed, np.array([offset + (1 << 40)], dtype=np.uint64))[0]
        return CounterRNG(int(child))
