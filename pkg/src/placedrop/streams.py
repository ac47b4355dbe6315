"""Deterministic random number streams

Every random draw in placedrop comes from a stream addressed by a coordinate::

    (seed, purpose, epoch, iteration, sample)

The coordinate becomes the spawn key of a :class:`numpy.random.SeedSequence` whose
entropy is the global seed; that sequence keys a counter-based
:class:`numpy.random.Philox` generator. Streams with different coordinates are
statistically independent, and a stream's output never depends on which other streams
were drawn from, or in what order. This is what lets PLACE be switched off without
disturbing the augmentation draws, and what lets runs execute in parallel while staying
bit-identical to serial execution.

The purpose is hashed with CRC-32 so the derivation is stable across processes and
Python versions (unlike :func:`hash`).
"""

from __future__ import annotations

import zlib
from logging import getLogger
from typing import Tuple

import numpy as np


logger = getLogger(__name__)

PURPOSES = (
    "render",
    "split",
    "init",
    "shuffle",
    "standard",
    "randaug",
    "style",
    "layer",
    "place",
    "mix",
    "gradcheck",
)
"""Every purpose a stream is drawn for"""


def purpose_key(purpose: str) -> int:
    """The integer a purpose contributes to the spawn key"""
    if purpose not in PURPOSES:
        raise ValueError(f"Unknown stream purpose {purpose!r} - expected one of {PURPOSES}")
    return zlib.crc32(purpose.encode("utf-8"))


def stream_key(
    seed: int,
    purpose: str,
    epoch: int = 0,
    iteration: int = 0,
    sample: int = 0,
) -> Tuple[int, ...]:
    """The full spawn key of a stream, useful for logging and tests"""
    for name, value in (
        ("seed", seed),
        ("epoch", epoch),
        ("iteration", iteration),
        ("sample", sample),
    ):
        if value < 0:
            raise ValueError(f"Stream coordinate {name} must be non-negative, not {value}")
    return (purpose_key(purpose), epoch, iteration, sample)


def stream(
    seed: int,
    purpose: str,
    epoch: int = 0,
    iteration: int = 0,
    sample: int = 0,
) -> np.random.Generator:
    """Get the generator for one ``(seed, purpose, epoch, iteration, sample)`` coordinate"""
    key = stream_key(seed, purpose, epoch, iteration, sample)
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=key)
    return np.random.Generator(np.random.Philox(sequence))


class StreamFactory:
    """Binds a seed so call sites only name the remaining coordinates

    Parameters:
        seed: The global seed of a run.
    """

    __slots__ = ("seed",)

    def __init__(self, seed: int) -> None:
        if seed < 0:
            raise ValueError(f"Seeds must be non-negative, not {seed}")
        self.seed = seed

    def __call__(
        self,
        purpose: str,
        epoch: int = 0,
        iteration: int = 0,
        sample: int = 0,
    ) -> np.random.Generator:
        return stream(self.seed, purpose, epoch, iteration, sample)

    def per_sample(
        self, purpose: str, epoch: int, iteration: int, count: int
    ) -> Tuple[np.random.Generator, ...]:
        """One independent stream for each sample of an iteration"""
        return tuple(self(purpose, epoch, iteration, i) for i in range(count))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(seed={self.seed})"
