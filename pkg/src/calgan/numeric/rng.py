"""Seeded, checkpointable random streams.

The bit stream comes from the counter-based Philox-4x64 generator keyed
directly by (seed, stream id), bypassing numpy's seed-sequence hashing. All
floating-point transforms (uniform doubles, Box-Muller normals, shuffles)
are done here so the output does not depend on numpy's distribution code.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64-v1"
_MASK64 = (1 << 64) - 1


class SeededRng:
    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._bg = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))

    algorithm = ALGORITHM

    def child(self, stream: int) -> "SeededRng":
        """Independent stream sharing this seed (e.g. one per role)."""
        return SeededRng(self.seed, (self.stream * 1_000_003 + stream + 1) & _MASK64)

    def uniform(self, size=None):
        """Doubles in [0, 1) built from the top 53 bits of each draw."""
        n = 1 if size is None else int(np.prod(size))
        raw = self._bg.random_raw(n)
        u = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return float(u[0]) if size is None else u.reshape(size)

    def uniform_range(self, low, high, size=None):
        return low + (high - low) * self.uniform(size)

    def normal(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return float(z[0]) if size is None else z.reshape(size)

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return min(int(self.uniform() * n), n - 1)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        out = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def get_state(self) -> dict:
        st = self._bg.state
        return {
            "algorithm": ALGORITHM,
            "seed": self.seed,
            "stream": self.stream,
            "counter": [int(v) for v in st["state"]["counter"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        if state.get("algorithm") != ALGORITHM:
            raise ValueError(f"unsupported rng algorithm {state.get('algorithm')!r}")
        rng = cls(state["seed"], state["stream"])
        st = rng._bg.state
        st["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = state["buffer_pos"]
        rng._bg.state = st
        return rng
