"""Deterministic random numbers for every seeded operation in the package.

The generator is xoshiro256** seeded through splitmix64, run as LANES
parallel streams that are advanced in lockstep and read interleaved
(lane 0, lane 1, ..., lane LANES-1, lane 0, ...). Lane i's four state
words are outputs 4i..4i+3 of a single splitmix64 sequence started at
the seed. Each draw request rounds up to a whole number of lane steps;
surplus values are discarded, so a stream is fully determined by the
seed and the sequence of calls. This is platform independent: only
uint64 wraparound arithmetic and float64 ops are involved.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

_MASK = (1 << 64) - 1

# Number of parallel xoshiro lanes; part of the stream definition.
LANES = 16


def splitmix64_next(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    k = np.uint64(k)
    inv = np.uint64(64) - k
    return (x << k) | (x >> inv)


class Rng:
    """Seeded vectorized xoshiro256** stream with float64 helpers."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        sm = self.seed
        words = np.empty((4, LANES), dtype=np.uint64)
        for lane in range(LANES):
            for j in range(4):
                sm, out = splitmix64_next(sm)
                words[j, lane] = out
        self._s = words

    def _raw_block(self) -> np.ndarray:
        """One lockstep advance of all lanes -> LANES uint64 values."""
        s = self._s
        result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
        t = s[1] << np.uint64(17)
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uint64s(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be >= 0")
        blocks = -(-n // LANES)
        if blocks == 0:
            return np.empty(0, dtype=np.uint64)
        out = np.empty(blocks * LANES, dtype=np.uint64)
        for i in range(blocks):
            out[i * LANES:(i + 1) * LANES] = self._raw_block()
        return out[:n]

    def uniforms(self, n: int) -> np.ndarray:
        """n float64 values uniform in [0, 1) (53-bit resolution)."""
        raw = self.uint64s(n)
        return (raw >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return float(lo + (hi - lo) * self.uniforms(1)[0])

    def uniform_array(self, shape, lo: float, hi: float) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        vals = lo + (hi - lo) * self.uniforms(n)
        return vals.reshape(shape)

    def normals(self, shape) -> np.ndarray:
        """Standard normal draws via Box-Muller on uniform pairs."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = -(-n // 2)
        u1 = 1.0 - self.uniforms(pairs)  # in (0, 1], log is finite
        u2 = self.uniforms(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def integer(self, n: int) -> int:
        """One integer uniform in [0, n); floor of a scaled uniform draw.

        The O(2^-53) modulo bias is irrelevant at desk scale.
        """
        if n <= 0:
            raise ValueError("n must be positive")
        return min(n - 1, int(self.uniforms(1)[0] * n))

    def shuffle_indices(self, n: int) -> np.ndarray:
        """A seeded permutation of range(n) (Fisher-Yates)."""
        idx = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def weighted_choice(self, weights) -> int:
        """Index drawn with probability proportional to weights."""
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0 or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be a nonempty nonnegative vector")
        cum = np.cumsum(w / w.sum())
        u = self.uniforms(1)[0]
        return int(np.searchsorted(cum, u, side="right").clip(0, len(w) - 1))


def hash64(*parts: int | str) -> int:
    """Stable 64-bit hash of a mixed int/str tuple (blake2b based).

    Each part is encoded with a type tag and length so distinct tuples
    cannot collide by concatenation.
    """
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        if isinstance(p, bool) or not isinstance(p, (int, str)):
            raise TypeError(f"hash64 parts must be int or str, got {type(p)!r}")
        if isinstance(p, int):
            h.update(b"i")
            h.update((p & _MASK).to_bytes(8, "little"))
        else:
            raw = p.encode("utf-8")
            h.update(b"s")
            h.update(len(raw).to_bytes(4, "little"))
            h.update(raw)
    return int.from_bytes(h.digest(), "little")


def derive_seed(global_seed: int, *name: int | str) -> int:
    """Per-job / per-purpose seed derived from a global seed and a name."""
    return hash64(global_seed, *name)
