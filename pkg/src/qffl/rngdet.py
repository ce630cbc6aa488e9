"""Seeded, domain-separated random streams.

Every consumer of randomness (data generation, splits, device sampling,
SGD shuffles) opens its own stream named by a hierarchical label such as
``"sgd:round:3:device:17:epoch:0"``.  The stream key is derived from
SHA-256 of ``(seed, label)``, so adding a new consumer never shifts the
draws seen by an existing one.

The bit source is SplitMix64 evaluated in counter mode: output ``i`` of a
stream is ``mix(key + (i + 1) * GAMMA)`` in 64-bit wrapping arithmetic.
This is exactly the SplitMix64 sequence started at ``key``, but can be
evaluated for a whole block at once with numpy.  On top of it:

* uniforms take the top 53 bits: ``(x >> 11) * 2**-53`` in ``[0, 1)``;
* Gaussians use the Box-Muller transform on consecutive uniform pairs;
* permutations use the Fisher-Yates shuffle.
"""

from __future__ import annotations

import hashlib

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO_POW_M53 = 2.0**-53


def derive_key(seed: int, label: str) -> int:
    """64-bit stream key for ``(seed, label)``."""
    digest = hashlib.sha256(f"{int(seed)}\x00{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _splitmix(states: np.ndarray) -> np.ndarray:
    z = states
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SeededStream:
    """A single-consumer deterministic random stream.

    Identical ``(seed, label)`` pairs produce identical sequences on every
    platform.  Not thread-safe; open one stream per consumer.
    """

    __slots__ = ("seed", "label", "_key", "_counter")

    def __init__(self, seed: int, label: str):
        self.seed = int(seed)
        self.label = label
        self._key = np.uint64(derive_key(seed, label))
        self._counter = 0

    def __repr__(self) -> str:
        return f"SeededStream(seed={self.seed}, label={self.label!r}, position={self._counter})"

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs."""
        if n < 0:
            raise ValueError("n must be non-negative")
        idx = np.arange(self._counter + 1, self._counter + 1 + n, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _splitmix(self._key + idx * GAMMA)

    def uniform01(self, size: int | None = None):
        """Uniform draw(s) on ``[0, 1)`` with 53-bit resolution."""
        n = 1 if size is None else size
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
        return float(u[0]) if size is None else u

    def gaussian(self, size: int | None = None):
        """Standard normal draw(s) via Box-Muller.

        Each pair of uniforms yields two normals; an odd request discards
        the second normal of the final pair.
        """
        n = 1 if size is None else size
        pairs = (n + 1) // 2
        u = self.uniform01(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return float(z[0]) if size is None else z[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of ``range(n)``."""
        perm = list(range(n))
        if n > 1:
            u = self.uniform01(n - 1)
            # position i (from n-1 down to 1) swaps with j uniform on [0, i]
            js = (u * np.arange(n, 1, -1)).astype(np.int64).tolist()
            for i, j in zip(range(n - 1, 0, -1), js):
                perm[i], perm[j] = perm[j], perm[i]
        return np.asarray(perm, dtype=np.int64)


def uniform01(stream: SeededStream, size: int | None = None):
    return stream.uniform01(size)


def gaussian(stream: SeededStream, size: int | None = None):
    return stream.gaussian(size)


def permutation(stream: SeededStream, n: int) -> np.ndarray:
    return stream.permutation(n)
