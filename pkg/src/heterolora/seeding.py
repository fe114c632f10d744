"""Labelled random substreams derived from one root seed."""

from __future__ import annotations

import random
import zlib

import numpy as np

DEFAULT_SEEDS = (0, 13, 42, 87, 100)


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Independent generator for ``label`` under root ``seed``.

    Streams depend only on (seed, label), never on the order in which other
    streams were drawn.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(label.encode()),))
    return np.random.default_rng(ss)


class Seeds:
    def __init__(self, seed: int):
        self.seed = int(seed)

    def rng(self, label: str) -> np.random.Generator:
        return rng_for(self.seed, label)

    def __repr__(self) -> str:
        return f"Seeds({self.seed})"


def set_global_seed(seed: int) -> Seeds:
    """Seed the legacy global generators and return the labelled-stream factory.

    Library code only draws from labelled streams; the global seeding guards
    third-party code that reaches for ``random`` or ``np.random``.
    """
    random.seed(seed)
    np.random.seed(seed % 2**32)
    return Seeds(seed)
