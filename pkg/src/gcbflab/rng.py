"""Counter-based, splittable random streams (numpy Philox underneath)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class RngState:
    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        key = (self.seed & _MASK) | ((self.stream & _MASK) << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def split(self, n: int) -> list["RngState"]:
        """``n`` child streams, distinct from each other and from this one."""
        base = (self.stream * 0x9E3779B97F4A7C15 + 1) & _MASK
        return [RngState(self.seed, (base + 2 * k + 1) & _MASK) for k in range(n)]

    def child(self, k: int) -> "RngState":
        return self.split(k + 1)[k]
