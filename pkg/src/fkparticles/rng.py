"""Counter-based random streams for replicas.

Every replica owns one Philox key. Each purpose (mutation, selection clock,
thinning, victim choice, clone choice, initial draw) reads a disjoint region
of the Philox counter space under that key, so two runs that differ only in
the selection kernel consume identical mutation and initial-draw randomness.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class Purpose(enum.IntEnum):
    MUTATION = 0
    CLOCK = 1
    THINNING = 2
    VICTIM = 3
    CLONE = 4
    INIT = 5


def derive_key(*parts: int) -> int:
    """Hash a tuple of non-negative integers into a 64-bit Philox key."""
    words = []
    for p in parts:
        p = int(p)
        if p < 0:
            raise ValueError("key parts must be non-negative")
        # SeedSequence wants 32-bit words; split wide integers explicitly.
        while True:
            words.append(p & 0xFFFFFFFF)
            p >>= 32
            if p == 0:
                break
        words.append(0xA5A5A5A5)  # separator so (1, 23) != (12, 3)
    state = np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)
    return int(state[0])


def replica_keys(base_key: int, count: int) -> np.ndarray:
    """Deterministic per-replica keys split off one base key."""
    from ._philox import split_keys

    return split_keys(np.uint64(base_key), int(count))


def philox_generator(key: int, purpose: int) -> np.random.Generator:
    # The purpose sits in the top counter word: substreams are 2**192 draws apart.
    bitgen = np.random.Philox(key=key, counter=[0, 0, 0, int(purpose)])
    return np.random.Generator(bitgen)


def exponential(gen: np.random.Generator, rate: float) -> float:
    """Exponential waiting time by inversion of one uniform.

    The compiled engine uses the same mapping, so both engines turn a given
    Philox stream into identical clock times. ``math.log1p`` is the libm
    routine numba calls; ``np.log1p`` can differ from it in the last bit.
    """
    return -math.log1p(-gen.random()) / rate


@dataclass
class Streams:
    """Per-purpose generators of a single replica."""

    key: int
    mutation: np.random.Generator
    clock: np.random.Generator
    thinning: np.random.Generator
    victim: np.random.Generator
    clone: np.random.Generator
    init: np.random.Generator

    @classmethod
    def from_key(cls, key: int) -> "Streams":
        return cls(
            key=key,
            mutation=philox_generator(key, Purpose.MUTATION),
            clock=philox_generator(key, Purpose.CLOCK),
            thinning=philox_generator(key, Purpose.THINNING),
            victim=philox_generator(key, Purpose.VICTIM),
            clone=philox_generator(key, Purpose.CLONE),
            init=philox_generator(key, Purpose.INIT),
        )

    @classmethod
    def from_seed(cls, seed: int, *parts: int) -> "Streams":
        return cls.from_key(derive_key(seed, *parts))


def as_streams(rng) -> Streams:
    """Accept a Streams object, an integer seed or None (seed 0)."""
    if isinstance(rng, Streams):
        return rng
    if rng is None:
        return Streams.from_seed(0)
    if isinstance(rng, (int, np.integer)):
        return Streams.from_seed(int(rng))
    raise TypeError(f"cannot build random streams from {type(rng).__name__}")
