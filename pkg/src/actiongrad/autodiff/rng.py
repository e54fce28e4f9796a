"""Named, seeded random streams."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class RngStream:
    """Deterministic PCG64 stream identified by ``(seed, name)``.

    Child streams are derived by name, so adding draws to one stream never
    shifts the values seen by a sibling.
    """

    def __init__(self, seed: int, name: str = "root"):
        self.seed = int(seed)
        self.name = name
        self.draws = 0
        self._gen = np.random.Generator(np.random.PCG64(derive_seed(self.seed, name)))

    def child(self, name: str) -> "RngStream":
        return RngStream(self.seed, f"{self.name}/{name}")

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, name={self.name!r}, draws={self.draws})"

    def uniform(self, low=0.0, high=1.0, size=None):
        self.draws += 1
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        self.draws += 1
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        self.draws += 1
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        self.draws += 1
        return self._gen.random(size)
