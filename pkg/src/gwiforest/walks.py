"""Direct samplers for discrete marginals, bypassing forest construction.

Two facts make single-coordinate distributions cheap.  The depth-first walk
of one type is a random walk whose increments are that type's diagonal
offspring law minus one, so its endpoint is a single convolution draw.  And
the level populations evolve as a Markov chain driven by exact convolutions
of the offspring laws, one vectorized transition per level across all
replicates.  The convergence experiments lean on both; full forests are
only built where the statistic genuinely needs the tree (left heights,
identity audits).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ResourceLimitError
from .laws import Law
from .scaling import OffspringEnsemble
from .seeds import as_generator

__all__ = [
    "walk_endpoint_samples",
    "walk_extreme_samples",
    "population_chain",
]

# soft ceiling on materialized draws per vectorized call
_DRAW_BUDGET = 20_000_000


def walk_endpoint_samples(law: Law, n_steps: int, replicates: int, rng):
    """Endpoint of the walk with increments (law - 1) after n_steps steps.

    Returns an int64 array of length replicates.  Work is chunked so that
    laws without a closed-form convolution stay within the draw budget.
    """
    if n_steps < 0:
        raise ConfigError(f"step count must be nonnegative, got {n_steps}")
    if replicates <= 0:
        raise ConfigError(f"need at least one replicate, got {replicates}")
    rng = as_generator(rng)
    out = np.empty(replicates, dtype=np.int64)
    chunk = max(1, _DRAW_BUDGET // max(1, n_steps))
    for lo in range(0, replicates, chunk):
        hi = min(lo + chunk, replicates)
        counts = np.full(hi - lo, n_steps, dtype=np.int64)
        out[lo:hi] = law.sample_sum(rng, counts) - n_steps
    return out


def walk_extreme_samples(law: Law, n_steps: int, replicates: int, rng):
    """Endpoint, running minimum, and height after n_steps walk steps.

    The height at n is the number of earlier times whose value equals the
    minimum of the walk from there to n; it is read off a reverse cumulative
    minimum, so each replicate costs one materialized path.  Returns a dict
    with int64 arrays 'end', 'min', 'height'.
    """
    if n_steps <= 0:
        raise ConfigError(f"walk extremes need at least one step, got {n_steps}")
    if replicates <= 0:
        raise ConfigError(f"need at least one replicate, got {replicates}")
    rng = as_generator(rng)
    end = np.empty(replicates, dtype=np.int64)
    low = np.empty(replicates, dtype=np.int64)
    height = np.empty(replicates, dtype=np.int64)
    chunk = max(1, _DRAW_BUDGET // (4 * n_steps))
    for lo in range(0, replicates, chunk):
        hi = min(lo + chunk, replicates)
        rows = hi - lo
        steps = law.sample(rng, (rows, n_steps)).astype(np.int64) - 1
        walk = np.cumsum(steps, axis=1)
        end[lo:hi] = walk[:, -1]
        np.minimum(walk.min(axis=1), 0, out=low[lo:hi])
        # D(k) for k = 0..n-1, then the minimum of D[k..n] from the right
        walk = np.concatenate([np.zeros((rows, 1), dtype=np.int64), walk], axis=1)
        suffix = np.minimum.accumulate(walk[:, ::-1], axis=1)[:, ::-1]
        height[lo:hi] = np.count_nonzero(walk[:, :-1] == suffix[:, :-1], axis=1)
    return {"end": end, "min": low, "height": height}


def population_chain(
    ensemble: OffspringEnsemble,
    checkpoints,
    replicates: int,
    rng,
    max_population: int = 1_000_000_000,
):
    """Level populations of the immigration forest, one transition per level.

    Z^j(0) counts the type-j roots; each level adds exact convolution draws
    of every offspring law over the current populations plus one immigration
    draw (the spine emits at every level).  Returns an int64 array of shape
    (len(checkpoints), n_types, replicates) sampled at the requested
    heights.  Identical in law to the census of a generated forest whose
    horizon exceeds the last checkpoint.
    """
    checkpoints = [int(h) for h in checkpoints]
    if not checkpoints or any(h < 0 for h in checkpoints):
        raise ConfigError("checkpoints must be nonnegative heights")
    if sorted(checkpoints) != checkpoints:
        raise ConfigError("checkpoints must be sorted ascending")
    if replicates <= 0:
        raise ConfigError(f"need at least one replicate, got {replicates}")
    rng = as_generator(rng)
    n = ensemble.n_types
    state = np.tile(
        np.asarray(ensemble.roots, dtype=np.int64)[:, None], (1, replicates)
    )
    out = np.empty((len(checkpoints), n, replicates), dtype=np.int64)
    nxt = 0
    while nxt < len(checkpoints) and checkpoints[nxt] == 0:
        out[nxt] = state
        nxt += 1
    for h in range(1, checkpoints[-1] + 1):
        new = np.empty_like(state)
        for j in range(n):
            total = ensemble.nu[j].sample(rng, replicates).astype(np.int64)
            for i in range(n):
                total += ensemble.mu[i][j].sample_sum(rng, state[i])
            new[j] = total
        state = new
        peak = int(state.sum(axis=0).max(initial=0))
        if peak > max_population:
            raise ResourceLimitError(
                f"population reached {peak} at height {h}, over the "
                f"cap {max_population}"
            )
        while nxt < len(checkpoints) and checkpoints[nxt] == h:
            out[nxt] = state
            nxt += 1
    return out
