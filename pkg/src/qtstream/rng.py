"""Seedable, splittable random number generation.

Every stochastic operation in the package takes an explicit seed (or an
already-constructed generator). Substreams are derived through
``numpy.random.SeedSequence`` spawn keys, so any keyed unit of work
(a benchmark run, a calibration chunk) gets an independent stream that
does not depend on execution order or worker count.
"""

from __future__ import annotations

import numpy as np

SeedLike = int | np.random.SeedSequence | np.random.Generator


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return the generator for the substream identified by ``key``.

    The same ``(seed, key)`` pair always yields the same stream,
    regardless of which other substreams have been consumed.
    """
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def as_generator(seed: SeedLike) -> np.random.Generator:
    """Coerce an int seed, SeedSequence, or Generator into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
