"""Counter-based splittable random streams.

A stream is identified by ``(master_seed, stream_path)``.  Its generator is a
Philox bit generator keyed through ``numpy.random.SeedSequence`` with the path
as spawn key, so ``substream(i)`` is a pure function of the seed, the path and
``i``.  Scheduling work over any number of workers never changes what a given
path index draws.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np


def tag_id(tag: str | int) -> int:
    """Map a purpose tag to a stable non-negative integer."""
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError("stream keys must be non-negative")
        return int(tag)
    return zlib.crc32(tag.encode("utf-8"))


@dataclass(frozen=True)
class RandomStream:
    master_seed: int
    stream_path: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "stream_path", tuple(tag_id(k) for k in self.stream_path))

    def child(self, *keys: str | int) -> "RandomStream":
        return RandomStream(self.master_seed, self.stream_path + tuple(tag_id(k) for k in keys))

    def substream(self, i: int) -> "RandomStream":
        return self.child(int(i))

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(int(self.master_seed), spawn_key=self.stream_path)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self.seed_sequence()))

    def normals(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)
