"""Reproducible, independent random streams.

Each stream is a Philox (counter-based) generator keyed by a master seed and a
stream index through :class:`numpy.random.SeedSequence`, so chain ``m`` of a
run always sees the same draws no matter how chains are scheduled.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    master_seed: int
    stream_index: int = 0

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if self.stream_index < 0:
            raise ValueError("stream_index must be non-negative")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_index,))
        return np.random.Generator(np.random.Philox(seq))

    def child(self, *path: int) -> "RngStream":
        """Derive a sub-stream; the derivation is a pure function of the path."""
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_index, *path))
        seed = int(seq.generate_state(2, dtype=np.uint64)[0])
        return RngStream(seed, 0)


def make_generator(master_seed: int, stream_index: int = 0) -> np.random.Generator:
    return RngStream(master_seed, stream_index).generator()


def path_generator(master_seed: int, *path: int) -> np.random.Generator:
    """Generator for an arbitrary-depth stream path, e.g. (per_class, repeat, purpose)."""
    seq = np.random.SeedSequence(master_seed, spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


def as_generator(rng) -> np.random.Generator:
    """Accept a Generator, an RngStream, or an integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if rng is None or isinstance(rng, (int, np.integer)):
        return make_generator(0 if rng is None else int(rng))
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")
