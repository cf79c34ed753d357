"""Counter-based Gaussian noise streams.

Every block of noise is drawn from a Philox generator whose key is derived
from ``(seed, input id, stage tags..., block index)``. A block can therefore
be regenerated in isolation, and the noise used for sample ``i`` does not
depend on how many workers split the work or in which order they ran.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

BLOCK_SIZE = 4096


def _tag_word(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError(f"integer stream tags must be >= 0, got {tag}")
        return int(tag)
    digest = hashlib.blake2b(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class NoiseStream:
    """Deterministic source of N(0, 1) blocks addressed by a key path."""

    seed: int
    path: tuple = ()

    def child(self, *tags) -> "NoiseStream":
        return NoiseStream(self.seed, self.path + tuple(tags))

    def for_input(self, input_id: int) -> "NoiseStream":
        return self.child("input", int(input_id))

    def _entropy(self, block: int) -> list[int]:
        return [int(self.seed)] + [_tag_word(t) for t in self.path] + [0x51B0C7, int(block)]

    def generator(self, block: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self._entropy(block))
        return np.random.Generator(np.random.Philox(ss))

    def standard_normal(self, block: int, size: int, dim: int) -> np.ndarray:
        return self.generator(block).standard_normal((size, dim))

    def blocks(self, n: int, block_size: int = BLOCK_SIZE):
        """Yield ``(block_index, size)`` pairs covering ``n`` samples."""
        start, b = 0, 0
        while start < n:
            size = min(block_size, n - start)
            yield b, size
            start += size
            b += 1
