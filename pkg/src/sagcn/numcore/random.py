"""Seeded random streams.

Every stochastic step in the package draws from a ``numpy.random.Generator``
backed by the counter-based Philox bit generator, so a seed plus the call
sequence fully determines the stream.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child streams from ``rng``."""
    return rng.spawn(n)
