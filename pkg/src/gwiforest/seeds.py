"""Seed handling: one place that turns user seeds into generators.

Replicate streams come from SeedSequence spawning, so a run is reproducible
from its root seed alone and independent of how replicates are scheduled.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

__all__ = ["as_generator", "spawn_generators"]


def as_generator(seed=None) -> np.random.Generator:
    """Accept None, an integer seed, a SeedSequence, or a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (int, np.integer, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise ConfigError(f"cannot build a random generator from {seed!r}")


def spawn_generators(seed, count: int) -> list[np.random.Generator]:
    """Independent child generators, deterministic in (seed, count, order)."""
    if count < 0:
        raise ConfigError("count must be >= 0")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in root.spawn(count)]
