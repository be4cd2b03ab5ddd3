"""Counter-based pseudo-random streams.

A stream is keyed by ``(seed, stream_id)``; each draw consumes one counter
value. Values are a pure function of ``(seed, stream_id, counter)`` so a
consumer can be added without perturbing the others, and a resumed run can
rebuild any stream from its counter.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

_MASK64 = (1 << 64) - 1

# One stream id per consumer.
STREAM_DATA = 1
STREAM_INIT = 2
STREAM_VIEW = 3
STREAM_REPARAM = 4
STREAM_BATCH = 5
STREAM_EXTRACTOR = 6
STREAM_EVAL = 7
STREAM_MIXING = 8
STREAM_ENV = 9


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary hashable parts."""
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


@dataclass
class PrngStream:
    seed: int
    stream_id: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        """A numpy generator for the current counter; advances the counter."""
        bitgen = np.random.Philox(
            key=np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64),
            counter=np.array([0, 0, self.counter & _MASK64, 0], dtype=np.uint64),
        )
        self.counter += 1
        return np.random.Generator(bitgen)

    def at(self, counter: int) -> "PrngStream":
        return PrngStream(self.seed, self.stream_id, counter)

    def child(self, sub_id: int) -> "PrngStream":
        """Independent stream for a sub-consumer (e.g. one per episode)."""
        return PrngStream(self.seed, derive_seed(self.stream_id, sub_id), 0)


def prng_draw(stream: PrngStream, kind: str, shape) -> Tensor:
    gen = stream.generator()
    if kind == "uniform01":
        data = gen.random(shape)
    elif kind == "standard_normal":
        data = gen.standard_normal(shape)
    else:
        raise ValueError(f"unknown draw kind {kind!r}")
    return Tensor(data)
