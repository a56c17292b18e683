"""Colored forests with an immigration spine.

A forest holds N "real" types 1..N plus color 0, the spine: exactly one
color-0 vertex per height, each the parent of the next, emitting type-j
children by the immigration laws.  Vertices are labeled breadth-first:
heights weakly increase along labels, and within a height the children of
earlier parents come first, each parent's children ordered by color 1..N
with color 0 last.  Roots sit at height 0: k_j of type j, spine root last.

Generation is layer by layer and batched: many forests advance together,
one vectorized draw per (parent color, child type) per layer.  The batch is
the reproducibility unit: a fixed seed with the same batch size and horizon
regenerates identical forests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ResourceLimitError, ViolationError
from .scaling import OffspringEnsemble
from .seeds import as_generator

__all__ = [
    "ColoredForest",
    "generate_forest",
    "generate_forest_batch",
    "extend_forest_batch",
    "vertex_census",
    "to_jsonl",
    "from_jsonl",
]

DEFAULT_VERTEX_BUDGET = 10_000_000


@dataclass(frozen=True, eq=False)
class ColoredForest:
    colors: np.ndarray   # int16 in 0..n_types
    parents: np.ndarray  # int64, -1 for roots
    heights: np.ndarray  # int32
    n_types: int
    h_max: int

    def __post_init__(self) -> None:
        for name in ("colors", "parents", "heights"):
            arr = getattr(self, name)
            arr.flags.writeable = False

    @property
    def size(self) -> int:
        return self.colors.size

    @property
    def roots(self) -> tuple:
        """Root counts (k_1, ..., k_N); the single color-0 root is implicit."""
        at_zero = self.colors[self.heights == 0]
        counts = np.bincount(at_zero, minlength=self.n_types + 1)
        return tuple(int(c) for c in counts[1:])

    @property
    def root_vector(self) -> tuple:
        return (1,) + self.roots

    def __eq__(self, other) -> bool:
        if not isinstance(other, ColoredForest):
            return NotImplemented
        return (
            self.n_types == other.n_types
            and self.h_max == other.h_max
            and np.array_equal(self.colors, other.colors)
            and np.array_equal(self.parents, other.parents)
            and np.array_equal(self.heights, other.heights)
        )

    def validate(self) -> None:
        """Check every structural invariant; raise naming the first bad vertex."""
        c, p, h = self.colors, self.parents, self.heights
        n = c.size
        if not (p.size == n and h.size == n and n >= 1):
            raise ViolationError("array lengths disagree or forest is empty")
        bad = np.flatnonzero((c < 0) | (c > self.n_types))
        if bad.size:
            raise ViolationError(f"vertex {bad[0]}: color {c[bad[0]]} out of range")
        is_root = p == -1
        bad = np.flatnonzero(is_root & (h != 0))
        if bad.size:
            raise ViolationError(f"vertex {bad[0]}: root at height {h[bad[0]]}")
        idx = np.flatnonzero(~is_root)
        if idx.size:
            par = p[idx]
            bad = idx[(par < 0) | (par >= idx)]
            if bad.size:
                raise ViolationError(
                    f"vertex {bad[0]}: parent {p[bad[0]]} is not an earlier vertex"
                )
            bad = idx[h[idx] != h[par] + 1]
            if bad.size:
                raise ViolationError(
                    f"vertex {bad[0]}: height {h[bad[0]]} but parent height {h[p[bad[0]]]}"
                )
            zero_child = idx[c[idx] == 0]
            bad = zero_child[c[p[zero_child]] != 0]
            if bad.size:
                raise ViolationError(
                    f"vertex {bad[0]}: color-0 vertex under a color-{c[p[bad[0]]]} parent"
                )
        if int(h.max()) > self.h_max:
            raise ViolationError(
                f"vertex {int(np.argmax(h))}: height {int(h.max())} beyond horizon {self.h_max}"
            )
        spine = np.bincount(h[c == 0], minlength=self.h_max + 1)
        off = np.flatnonzero(spine != 1)
        if off.size:
            raise ViolationError(
                f"height {off[0]}: {spine[off[0]]} color-0 vertices, expected exactly 1"
            )
        if np.any(np.diff(h) < 0):
            bad = int(np.flatnonzero(np.diff(h) < 0)[0]) + 1
            raise ViolationError(f"vertex {bad}: height decreases along labels")
        # within a level: children follow parent label order, and within one
        # parent the colors run 1..N with color 0 last
        key = np.where(c == 0, self.n_types + 1, c).astype(np.int64)
        starts = np.searchsorted(h, np.arange(h[-1] + 1))
        bounds = np.append(starts, n)
        for lvl in range(bounds.size - 1):
            lo, hi = bounds[lvl], bounds[lvl + 1]
            if hi - lo <= 1:
                continue
            dp = np.diff(p[lo:hi])
            dk = np.diff(key[lo:hi])
            bad = np.flatnonzero((dp < 0) | ((dp == 0) & (dk < 0)))
            if bad.size:
                v = lo + bad[0] + 1
                raise ViolationError(
                    f"vertex {v}: sibling order broken (parent {p[v]}, color {c[v]})"
                )


# ---------------------------------------------------------------------------
# generation engine


class _Batch:
    """Accumulates layers for a batch of forests advancing together."""

    def __init__(self, ensemble: OffspringEnsemble, n_forests: int, max_vertices: int):
        self.ensemble = ensemble
        self.n_forests = n_forests
        self.max_vertices = max_vertices
        self.colors: list[np.ndarray] = []
        self.parents: list[np.ndarray] = []
        self.forests: list[np.ndarray] = []
        self.heights: list[np.ndarray] = []
        self.per_forest = np.zeros(n_forests, dtype=np.int64)
        self.total = 0

    def append_layer(self, colors, parents, forests, height) -> None:
        self.colors.append(colors)
        self.parents.append(parents)
        self.forests.append(forests)
        self.heights.append(np.full(colors.size, height, dtype=np.int32))
        self.per_forest += np.bincount(forests, minlength=self.n_forests)
        self.total += colors.size
        worst = int(self.per_forest.max())
        if worst > self.max_vertices:
            raise ResourceLimitError(
                f"forest exceeded the vertex budget ({worst} > {self.max_vertices}); "
                "lower h_max or raise max_vertices"
            )

    def root_layer(self, rng) -> tuple:
        ens = self.ensemble
        n = ens.n_types
        pattern = np.concatenate(
            [np.repeat(np.arange(1, n + 1, dtype=np.int16), ens.roots), [np.int16(0)]]
        )
        colors = np.tile(pattern, self.n_forests)
        forests = np.repeat(
            np.arange(self.n_forests, dtype=np.int32), pattern.size
        )
        parents = np.full(colors.size, -1, dtype=np.int64)
        self.append_layer(colors, parents, forests, 0)
        gids = np.arange(colors.size, dtype=np.int64)
        return colors, gids, forests

    def next_layer(self, frontier, rng, height: int) -> tuple:
        """One step: sample every child of the frontier, in canonical order."""
        f_colors, f_gids, f_forests = frontier
        ens = self.ensemble
        n = ens.n_types
        L = f_colors.size
        counts = np.zeros((L, n + 1), dtype=np.int64)
        # documented draw order: parent color 0..N, child type 1..N inside
        for i in range(n + 1):
            rows = np.flatnonzero(f_colors == i)
            if rows.size == 0:
                continue
            for j in range(1, n + 1):
                law = ens.nu[j - 1] if i == 0 else ens.mu[i - 1][j - 1]
                counts[rows, j - 1] = law.sample(rng, rows.size)
            if i == 0:
                counts[rows, n] = 1  # the spine continues
        rowsum = counts.sum(axis=1)
        pattern = np.concatenate(
            [np.arange(1, n + 1, dtype=np.int16), [np.int16(0)]]
        )
        child_colors = np.repeat(np.tile(pattern, L), counts.ravel())
        child_parents = np.repeat(f_gids, rowsum)
        child_forests = np.repeat(f_forests, rowsum)
        base = self.total
        self.append_layer(child_colors, child_parents, child_forests, height)
        gids = np.arange(base, base + child_colors.size, dtype=np.int64)
        return child_colors, gids, child_forests

    def extract(self, h_max: int) -> list[ColoredForest]:
        colors = np.concatenate(self.colors)
        parents = np.concatenate(self.parents)
        forests = np.concatenate(self.forests)
        heights = np.concatenate(self.heights)
        return _split_batch(
            colors, parents, forests, heights, self.n_forests, self.ensemble.n_types, h_max
        )


def _split_batch(colors, parents, forests, heights, n_forests, n_types, h_max):
    n = colors.size
    order = np.argsort(forests, kind="stable")
    counts = np.bincount(forests, minlength=n_forests)
    starts = np.concatenate([[0], np.cumsum(counts)])
    local = np.empty(n, dtype=np.int64)
    local[order] = np.arange(n, dtype=np.int64) - np.repeat(starts[:-1], counts)
    out = []
    for f in range(n_forests):
        rows = order[starts[f] : starts[f + 1]]
        par = parents[rows]
        par = np.where(par >= 0, local[np.maximum(par, 0)], -1)
        out.append(
            ColoredForest(
                colors=colors[rows].copy(),
                parents=par,
                heights=heights[rows].copy(),
                n_types=n_types,
                h_max=h_max,
            )
        )
    return out


def generate_forest_batch(
    ensemble: OffspringEnsemble,
    h_max: int,
    n_forests: int,
    seed=None,
    *,
    max_vertices: int = DEFAULT_VERTEX_BUDGET,
) -> list[ColoredForest]:
    """Generate n_forests independent forests truncated at height h_max."""
    if h_max < 0:
        raise ConfigError(f"h_max must be >= 0, got {h_max}")
    if n_forests < 1:
        raise ConfigError(f"n_forests must be >= 1, got {n_forests}")
    rng = as_generator(seed)
    batch = _Batch(ensemble, n_forests, max_vertices)
    frontier = batch.root_layer(rng)
    for height in range(1, h_max + 1):
        frontier = batch.next_layer(frontier, rng, height)
    return batch.extract(h_max)


def generate_forest(
    ensemble: OffspringEnsemble,
    h_max: int,
    seed=None,
    *,
    max_vertices: int = DEFAULT_VERTEX_BUDGET,
) -> ColoredForest:
    """Generate one forest truncated at height h_max."""
    return generate_forest_batch(
        ensemble, h_max, 1, seed, max_vertices=max_vertices
    )[0]


def extend_forest_batch(
    forests: list[ColoredForest],
    ensemble: OffspringEnsemble,
    new_h_max: int,
    rng,
    *,
    max_vertices: int = DEFAULT_VERTEX_BUDGET,
) -> list[ColoredForest]:
    """Continue truncated forests down to a deeper horizon.

    All inputs must share one horizon strictly below new_h_max.  The caller
    passes the generator whose stream should continue; extending is the
    layer-by-layer construction resumed from each forest's deepest layer.
    """
    if not forests:
        return []
    h0 = forests[0].h_max
    if any(f.h_max != h0 for f in forests):
        raise ConfigError("extend_forest_batch needs a common current horizon")
    if new_h_max <= h0:
        raise ConfigError("new_h_max must exceed the current horizon")
    rng = as_generator(rng)
    n_types = forests[0].n_types
    if ensemble.n_types != n_types:
        raise ConfigError(
            f"ensemble has {ensemble.n_types} types but forests have {n_types}"
        )
    w = len(forests)
    sizes = np.array([f.size for f in forests], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total_old = int(offsets[-1])

    f_colors, f_gids, f_forests = [], [], []
    for f_idx, f in enumerate(forests):
        rows = np.flatnonzero(f.heights == h0)
        f_colors.append(f.colors[rows])
        f_gids.append(rows.astype(np.int64) + offsets[f_idx])
        f_forests.append(np.full(rows.size, f_idx, dtype=np.int32))
    frontier = (
        np.concatenate(f_colors),
        np.concatenate(f_gids),
        np.concatenate(f_forests),
    )

    batch = _Batch(ensemble, w, max_vertices)
    batch.per_forest += sizes
    batch.total = total_old
    for height in range(h0 + 1, new_h_max + 1):
        frontier = batch.next_layer(frontier, rng, height)

    colors = np.concatenate(batch.colors)
    parents = np.concatenate(batch.parents)
    forest_ids = np.concatenate(batch.forests)
    heights = np.concatenate(batch.heights)
    n_new = colors.size
    order = np.argsort(forest_ids, kind="stable")
    counts = np.bincount(forest_ids, minlength=w)
    starts = np.concatenate([[0], np.cumsum(counts)])
    local_new = np.empty(n_new, dtype=np.int64)
    local_new[order] = np.arange(n_new, dtype=np.int64) - np.repeat(starts[:-1], counts)

    out = []
    for f_idx, f in enumerate(forests):
        rows = order[starts[f_idx] : starts[f_idx + 1]]
        par = parents[rows]
        is_old = par < total_old
        loc_par = np.where(
            is_old,
            par - offsets[f_idx],
            np.where(par >= total_old, local_new[np.maximum(par - total_old, 0)], 0)
            + f.size,
        )
        out.append(
            ColoredForest(
                colors=np.concatenate([f.colors, colors[rows]]),
                parents=np.concatenate([f.parents, loc_par]),
                heights=np.concatenate([f.heights, heights[rows]]),
                n_types=n_types,
                h_max=new_h_max,
            )
        )
    return out


# ---------------------------------------------------------------------------


def vertex_census(forest: ColoredForest) -> np.ndarray:
    """counts[c][h] = number of color-c vertices at height h."""
    counts = np.zeros((forest.n_types + 1, forest.h_max + 1), dtype=np.int64)
    np.add.at(counts, (forest.colors.astype(np.int64), forest.heights), 1)
    return counts


def to_jsonl(forest: ColoredForest, fp) -> None:
    """One vertex per line: {"index", "color", "parent", "height"}."""
    close = False
    if isinstance(fp, (str, bytes)):
        fp = open(fp, "w", encoding="utf-8")
        close = True
    try:
        for i in range(forest.size):
            parent = int(forest.parents[i])
            fp.write(
                json.dumps(
                    {
                        "index": i,
                        "color": int(forest.colors[i]),
                        "parent": None if parent < 0 else parent,
                        "height": int(forest.heights[i]),
                    }
                )
                + "\n"
            )
    finally:
        if close:
            fp.close()


def from_jsonl(fp, n_types: int | None = None) -> ColoredForest:
    """Parse and fully validate a serialized forest.

    The horizon is the deepest height present (the spine reaches it by
    construction); the type count defaults to the largest color seen.
    """
    close = False
    if isinstance(fp, (str, bytes)):
        fp = open(fp, "r", encoding="utf-8")
        close = True
    try:
        records = []
        for lineno, line in enumerate(fp, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                records.append(
                    (int(row["index"]), int(row["color"]),
                     -1 if row["parent"] is None else int(row["parent"]),
                     int(row["height"]))
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"line {lineno}: bad vertex record ({exc})") from exc
    finally:
        if close:
            fp.close()
    if not records:
        raise ConfigError("empty forest file")
    records.sort(key=lambda r: r[0])
    idx = np.array([r[0] for r in records])
    if not np.array_equal(idx, np.arange(len(records))):
        raise ConfigError("vertex indices are not exactly 0..n-1")
    colors = np.array([r[1] for r in records], dtype=np.int16)
    parents = np.array([r[2] for r in records], dtype=np.int64)
    heights = np.array([r[3] for r in records], dtype=np.int32)
    inferred = int(colors.max()) if n_types is None else n_types
    forest = ColoredForest(
        colors=colors,
        parents=parents,
        heights=heights,
        n_types=max(inferred, 1),
        h_max=int(heights.max()),
    )
    forest.validate()
    return forest
