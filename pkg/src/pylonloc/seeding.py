"""Named, independent RNG streams derived from one integer seed."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STREAMS = ("init", "shuffle", "augment", "data")


@dataclass
class SeedStreams:
    seed: int
    init: np.random.Generator
    shuffle: np.random.Generator
    augment: np.random.Generator
    data: np.random.Generator


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS.index(name)])


def set_seed(seed: int) -> SeedStreams:
    """Return fresh generators for weight init, batch shuffling, augmentation and data synthesis."""
    return SeedStreams(seed, *(stream(seed, name) for name in STREAMS))
