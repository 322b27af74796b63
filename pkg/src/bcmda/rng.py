"""Seeded, splittable random streams on top of numpy's counter-based Philox."""

from __future__ import annotations

import numpy as np


class Rng:
    """Deterministic random stream identified by ``(seed, path)``.

    ``split(*keys)`` derives an independent child stream; the child depends only
    on the seed and the key path, never on how many draws the parent has made,
    so data loading and per-step augmentation stay reproducible when resumed.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(k) for k in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def split(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.path + tuple(keys))

    # thin pass-throughs, kept explicit so call sites read naturally
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def beta(self, a, b, size=None):
        return self.gen.beta(a, b, size)

    def random(self, size=None):
        return self.gen.random(size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def get_state(self) -> dict:
        st = self.gen.bit_generator.state
        return {
            "seed": self.seed,
            "path": list(self.path),
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["path"]))
        rng.gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        return rng
