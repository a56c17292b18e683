"""Discrete paths read off a colored forest, and the exact identities among them.

Per type j the forest yields a depth-first vertex order (monochromatic
components in root order, depth-first inside), the Lukasiewicz path D^j over
that order, the component-relative height H^j, and the globally anchored
left height.  Per pair (i, j) it yields the children walk X^{i,j} over the
label order of type-i vertices, plus the immigration walk Y^j over the spine.
Height profiles Z, their running sums C, and the immigrant counter I tie the
walks to the profiles through an exact discrete time change, which
verify_discrete_timechange asserts with integer arithmetic.

Truncation never fabricates data: paths stop at the last fully explored
vertex and the bundle records where that happened.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .forest import ColoredForest, generate_forest_batch
from .seeds import as_generator
from .stats import chi_square_gof

__all__ = [
    "DepthFirstOrder",
    "TypeEncoding",
    "ProfileSet",
    "ChildrenWalks",
    "EncodingBundle",
    "TimechangeReport",
    "LeftHeightResult",
    "IdentityReport",
    "IDENTITY_NAMES",
    "depth_first_order",
    "lukasiewicz_path",
    "height_from_lukasiewicz",
    "profiles",
    "children_walks",
    "build_bundle",
    "verify_discrete_timechange",
    "verify_forest_identities",
    "left_height",
    "increment_law_check",
    "export_bundle_csv",
]

try:  # pragma: no cover - exercised implicitly by every call
    from numba import njit as _njit
except ImportError:  # pragma: no cover
    def _njit(**_kw):
        def wrap(fn):
            return fn

        return wrap


@_njit(cache=True)
def _dfs_kernel(indptr, child_sorted, roots_local):
    """Iterative DFS over a CSR child list, least child first.

    Returns the visit order (local ids) and the start offset of each
    component; components are taken in the given root order.
    """
    total = indptr.size - 1
    order = np.empty(total, np.int64)
    comp_starts = np.empty(roots_local.size, np.int64)
    stack = np.empty(total, np.int64)
    pos = 0
    for r in range(roots_local.size):
        comp_starts[r] = pos
        stack[0] = roots_local[r]
        top = 1
        while top > 0:
            top -= 1
            v = stack[top]
            order[pos] = v
            pos += 1
            a, b = indptr[v], indptr[v + 1]
            for c in range(b - 1, a - 1, -1):
                stack[top] = child_sorted[c]
                top += 1
    return order, comp_starts


@_njit(cache=True)
def _height_kernel(path):
    """Heights from a Lukasiewicz path in one left-to-right sweep.

    H(k) counts the indices l < k whose value is the running minimum of the
    path over [l, k]; a stack of candidate values stays weakly increasing, so
    each index is pushed and popped at most once.
    """
    n = path.size - 1
    heights = np.empty(n, np.int64)
    vals = np.empty(n + 1, np.int64)
    size = 0
    for k in range(n):
        if k > 0:
            if path[k - 1] <= path[k]:
                vals[size] = path[k - 1]
                size += 1
            else:
                while size > 0 and vals[size - 1] > path[k]:
                    size -= 1
        heights[k] = size
    return heights


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True, eq=False)
class DepthFirstOrder:
    """Type-restricted depth-first enumeration with truncation bookkeeping."""

    order: np.ndarray        # global vertex ids, every type-j vertex
    comp_starts: np.ndarray  # offsets into order where components begin
    incomplete: np.ndarray   # bool per component: truncation cut it
    n_complete: int          # vertices fully explored before truncation bites
    root_heights: np.ndarray

    @property
    def n_components(self) -> int:
        return self.comp_starts.size


@dataclass(frozen=True, eq=False)
class TypeEncoding:
    dfs: DepthFirstOrder
    lukasiewicz: np.ndarray  # length n_complete + 1, starts at 0
    height: np.ndarray       # length n_complete
    running_min: np.ndarray  # length n_complete


@dataclass(frozen=True, eq=False)
class ProfileSet:
    """Height profiles split by parent color.

    Z_split[i, j-1, h] counts type-j vertices at height h whose parent has
    color i (roots count under i = 0).  C arrays are running sums over h and
    I[j-1, h] counts type-j vertices with a non-type-j parent up to height h,
    which is exactly the number of type-j component roots there.
    """

    Z_split: np.ndarray  # (N+1, N, h_max+1)
    Z: np.ndarray        # (N, h_max+1)
    C_split: np.ndarray
    C: np.ndarray
    I: np.ndarray


@dataclass(frozen=True, eq=False)
class ChildrenWalks:
    """X[i-1][j-1](l): type-j children minus 1_{i=j} summed over the first l
    type-i vertices in label order; Y[j-1](l): type-j children of the spine
    summed over heights 0..l inclusive."""

    X: tuple
    Y: tuple


@dataclass(frozen=True, eq=False)
class EncodingBundle:
    n_types: int
    h_max: int
    roots: tuple
    types: tuple          # TypeEncoding per j
    profiles: ProfileSet
    walks: ChildrenWalks


@dataclass(frozen=True)
class TimechangeReport:
    ok: bool
    n_checked: int
    first_violation: tuple | None         # (equation, i, j, h)
    n_violations: int
    first_domain_violation: tuple | None  # (equation, i, j, h)
    n_domain_violations: int
    n_evolution_violations: int = 0
    n_timechange_violations: int = 0
    first_evolution_violation: tuple | None = None
    first_timechange_violation: tuple | None = None


@dataclass(frozen=True, eq=False)
class LeftHeightResult:
    values: np.ndarray      # -1 where out of horizon
    in_horizon: np.ndarray  # bool mask


@dataclass(frozen=True)
class IdentityReport:
    """Violation counts for the whole exact-identity suite on one forest."""

    ok: bool
    n_checked: int
    counts: dict  # identity name -> violation count
    first: dict   # identity name -> description of the first failure


# ---------------------------------------------------------------------------
# construction


def _children_counts(forest: ColoredForest) -> np.ndarray:
    """chi[v, j-1] = number of type-j children of vertex v."""
    n = forest.size
    chi = np.zeros((n, forest.n_types), dtype=np.int64)
    for j in range(1, forest.n_types + 1):
        sel = (forest.colors == j) & (forest.parents >= 0)
        chi[:, j - 1] = np.bincount(forest.parents[sel], minlength=n)
    return chi


def _check_type(forest: ColoredForest, j: int) -> None:
    if not 1 <= j <= forest.n_types:
        raise ConfigError(f"type {j} outside 1..{forest.n_types}")


def depth_first_order(forest: ColoredForest, j: int) -> DepthFirstOrder:
    """Enumerate type-j vertices: components in root order, depth-first inside."""
    _check_type(forest, j)
    colors, parents, heights = forest.colors, forest.parents, forest.heights
    tj = np.flatnonzero(colors == j)
    if tj.size == 0:
        e = np.empty(0, np.int64)
        return DepthFirstOrder(e, e.copy(), np.empty(0, bool), 0, e.copy())
    local = np.empty(forest.size, dtype=np.int64)
    local[tj] = np.arange(tj.size)
    par = parents[tj]
    in_type = (par >= 0) & (colors[np.maximum(par, 0)] == j)
    roots_local = np.flatnonzero(~in_type)
    kids = np.flatnonzero(in_type)
    kid_parents = local[par[kids]]
    by_parent = np.argsort(kid_parents, kind="stable")
    child_sorted = kids[by_parent]
    counts = np.bincount(kid_parents, minlength=tj.size)
    indptr = np.concatenate(([0], np.cumsum(counts)))
    order_local, comp_starts = _dfs_kernel(
        indptr.astype(np.int64), child_sorted.astype(np.int64), roots_local
    )
    order = tj[order_local]
    at_horizon = heights[order] == forest.h_max
    comp_sizes = np.diff(np.append(comp_starts, tj.size))
    comp_of = np.repeat(np.arange(comp_starts.size), comp_sizes)
    incomplete = np.bincount(
        comp_of[at_horizon], minlength=comp_starts.size
    ).astype(bool)
    n_complete = int(np.argmax(at_horizon)) if at_horizon.any() else tj.size
    return DepthFirstOrder(
        order=order,
        comp_starts=comp_starts,
        incomplete=incomplete,
        n_complete=n_complete,
        root_heights=heights[tj[roots_local]].astype(np.int64),
    )


def _encode_type(forest: ColoredForest, chi: np.ndarray, j: int) -> TypeEncoding:
    dfs = depth_first_order(forest, j)
    explored = dfs.order[: dfs.n_complete]
    steps = chi[explored, j - 1] - 1
    path = np.concatenate(([0], np.cumsum(steps)))
    height = _height_kernel(path)
    running_min = np.minimum.accumulate(path)[: dfs.n_complete]
    return TypeEncoding(dfs, path, height, running_min)


def lukasiewicz_path(forest: ColoredForest, j: int) -> np.ndarray:
    """D^j over the fully explored depth-first prefix; starts at 0, steps >= -1."""
    _check_type(forest, j)
    return _encode_type(forest, _children_counts(forest), j).lukasiewicz


def height_from_lukasiewicz(path) -> np.ndarray:
    """Component-relative heights of the visited vertices, one per path step."""
    path = np.asarray(path, dtype=np.int64)
    if path.ndim != 1 or path.size == 0 or path[0] != 0:
        raise ConfigError("a Lukasiewicz path is 1-d and starts at 0")
    return _height_kernel(path)


def profiles(forest: ColoredForest) -> ProfileSet:
    n, h_max = forest.n_types, forest.h_max
    pc = np.where(forest.parents >= 0, forest.colors[np.maximum(forest.parents, 0)], 0)
    z_split = np.zeros((n + 1, n, h_max + 1), dtype=np.int64)
    sel = forest.colors >= 1
    np.add.at(
        z_split,
        (pc[sel].astype(np.int64), forest.colors[sel].astype(np.int64) - 1,
         forest.heights[sel].astype(np.int64)),
        1,
    )
    z = z_split.sum(axis=0)
    c_split = np.cumsum(z_split, axis=2)
    c = np.cumsum(z, axis=1)
    total_in = c_split.sum(axis=0)
    own = c_split[np.arange(1, n + 1), np.arange(n), :]
    return ProfileSet(Z_split=z_split, Z=z, C_split=c_split, C=c, I=total_in - own)


def children_walks(forest: ColoredForest) -> ChildrenWalks:
    return _children_walks(forest, _children_counts(forest))


def _children_walks(forest: ColoredForest, chi: np.ndarray) -> ChildrenWalks:
    n, h_max = forest.n_types, forest.h_max
    x_rows = []
    for i in range(1, n + 1):
        ti = np.flatnonzero(forest.colors == i)
        explored = ti[: np.searchsorted(forest.heights[ti], h_max)]
        row = []
        for j in range(1, n + 1):
            steps = chi[explored, j - 1] - (1 if i == j else 0)
            row.append(np.concatenate(([0], np.cumsum(steps))))
        x_rows.append(tuple(row))
    spine = np.flatnonzero(forest.colors == 0)[:h_max]
    y = tuple(np.cumsum(chi[spine, j - 1]) for j in range(1, n + 1))
    return ChildrenWalks(X=tuple(x_rows), Y=y)


def build_bundle(forest: ColoredForest) -> EncodingBundle:
    """Compute every per-type and per-pair path of the forest in one pass."""
    chi = _children_counts(forest)
    types = tuple(
        _encode_type(forest, chi, j) for j in range(1, forest.n_types + 1)
    )
    return EncodingBundle(
        n_types=forest.n_types,
        h_max=forest.h_max,
        roots=forest.roots,
        types=types,
        profiles=profiles(forest),
        walks=_children_walks(forest, chi),
    )


# ---------------------------------------------------------------------------
# identities


def verify_discrete_timechange(bundle: EncodingBundle) -> TimechangeReport:
    """Check the discrete evolution and time-change identities exactly.

    For each type j and every height the profile must satisfy
        Z^j(h+1) = Z^j(0) + sum_i X^{i,j}(C^i(h)) + Y^j(h)
    and the split running sums must be recovered by evaluating the children
    walks at the time change C^i(h-1):
        C^{i->j}(h) = X^{i,j}(C^i(h-1))            for i not in {0, j}
        C^{j->j}(h) = X^{j,j}(C^j(h-1)) + C^j(h-1)
        C^{0->j}(h) = k_j + Y^j(h-1)
    Indices that would need vertices below the horizon are reported as
    domain problems, separately from genuine identity failures.
    """
    n, h_max = bundle.n_types, bundle.h_max
    prof, walks = bundle.profiles, bundle.walks
    n_checked = 0
    violations = []
    domain = []

    def eval_walk(walk, args, tag):
        ok = args < walk.size
        if not ok.all():
            for h in np.flatnonzero(~ok):
                domain.append((tag[0], tag[1], tag[2], int(h) + tag[3]))
        safe = np.where(ok, args, 0)
        return walk[safe], ok

    for j in range(1, n + 1):
        k_j = int(prof.Z[j - 1, 0])
        if h_max >= 1:
            hs = np.arange(h_max)
            rhs = np.full(h_max, k_j, dtype=np.int64)
            ok_all = np.ones(h_max, dtype=bool)
            for i in range(1, n + 1):
                vals, ok = eval_walk(
                    walks.X[i - 1][j - 1], prof.C[i - 1, :h_max], ("evolution", i, j, 1)
                )
                rhs += vals
                ok_all &= ok
            rhs += walks.Y[j - 1][:h_max]
            lhs = prof.Z[j - 1, 1:]
            bad = np.flatnonzero(ok_all & (lhs != rhs))
            n_checked += h_max
            for h in bad:
                violations.append(("evolution", 0, j, int(h) + 1))

            for i in range(0, n + 1):
                lhs = prof.C_split[i, j - 1, 1:]
                if i == 0:
                    rhs = k_j + walks.Y[j - 1][:h_max]
                    ok_all = np.ones(h_max, dtype=bool)
                elif i == j:
                    vals, ok_all = eval_walk(
                        walks.X[j - 1][j - 1], prof.C[j - 1, :h_max],
                        ("timechange", i, j, 1),
                    )
                    rhs = vals + prof.C[j - 1, :h_max]
                else:
                    rhs, ok_all = eval_walk(
                        walks.X[i - 1][j - 1], prof.C[i - 1, :h_max],
                        ("timechange", i, j, 1),
                    )
                bad = np.flatnonzero(ok_all & (lhs != rhs))
                n_checked += h_max
                for h in bad:
                    violations.append(("timechange", i, j, int(h) + 1))

        # height 0: only roots exist, and all roots carry parent color 0
        n_checked += n + 1
        if int(prof.C_split[0, j - 1, 0]) != k_j:
            violations.append(("timechange", 0, j, 0))
        for i in range(1, n + 1):
            if int(prof.C_split[i, j - 1, 0]) != 0:
                violations.append(("timechange", i, j, 0))

    evolution = [v for v in violations if v[0] == "evolution"]
    timechange = [v for v in violations if v[0] == "timechange"]
    return TimechangeReport(
        ok=not violations and not domain,
        n_checked=n_checked,
        first_violation=violations[0] if violations else None,
        n_violations=len(violations),
        first_domain_violation=domain[0] if domain else None,
        n_domain_violations=len(domain),
        n_evolution_violations=len(evolution),
        n_timechange_violations=len(timechange),
        first_evolution_violation=evolution[0] if evolution else None,
        first_timechange_violation=timechange[0] if timechange else None,
    )


def left_height(bundle: EncodingBundle, j: int) -> LeftHeightResult:
    """Global height of each explored type-j vertex, rebuilt from paths alone.

    The value at depth-first index i is H^j(i) plus the first height at
    which the immigrant count I^j exceeds the number of components completed
    before i (the negated running minimum of D^j).  Indices whose component
    root would lie below the horizon are flagged out instead of guessed.
    """
    if not 1 <= j <= bundle.n_types:
        raise ConfigError(f"type {j} outside 1..{bundle.n_types}")
    te = bundle.types[j - 1]
    imm = bundle.profiles.I[j - 1]
    completed = -te.running_min
    in_horizon = completed < imm[-1]
    first_passage = np.searchsorted(imm, completed, side="right")
    values = np.where(in_horizon, te.height + first_passage, -1)
    return LeftHeightResult(values=values, in_horizon=in_horizon)


IDENTITY_NAMES = (
    "height_reconstruction",
    "left_height",
    "component_count",
    "root_census",
    "evolution",
    "timechange",
)


def verify_forest_identities(forest: ColoredForest) -> IdentityReport:
    """Every exact identity on one forest, with violation counts per name.

    height_reconstruction: the stack heights computed from D^j equal the
    stored forest heights minus each component root's height.
    left_height: the global height rebuilt from (H^j, running min, I^j)
    equals the stored forest height of the visited vertex.
    component_count: the number of finished components before depth-first
    index i equals the negated running minimum of D^j at i.
    root_census: I^j(h) equals the number of j-roots at heights <= h.
    evolution / timechange: the profile recursion and the split running-sum
    substitution, delegated to verify_discrete_timechange.
    """
    bundle = build_bundle(forest)
    counts = dict.fromkeys(IDENTITY_NAMES, 0)
    first: dict = {}
    n_checked = 0
    heights = forest.heights.astype(np.int64)

    def note(name, bad, desc):
        counts[name] += int(bad)
        if bad and name not in first:
            first[name] = desc()

    for j in range(1, forest.n_types + 1):
        te = bundle.types[j - 1]
        dfs = te.dfs
        m = dfs.n_complete
        explored = dfs.order[:m]
        comp_of = (
            np.searchsorted(dfs.comp_starts, np.arange(m), side="right") - 1
        )

        expect = heights[explored] - dfs.root_heights[comp_of]
        bad = np.flatnonzero(te.height != expect)
        n_checked += m
        note(
            "height_reconstruction", bad.size,
            lambda j=j, b=bad, e=explored, t=te, x=expect: (
                f"type {j} vertex {int(e[b[0]])}: walk height "
                f"{int(t.height[b[0]])}, tree distance {int(x[b[0]])}"
            ),
        )

        bad = np.flatnonzero(-te.running_min != comp_of)
        n_checked += m
        note(
            "component_count", bad.size,
            lambda j=j, b=bad, t=te, c=comp_of: (
                f"type {j} index {int(b[0])}: running minimum "
                f"{int(t.running_min[b[0]])}, component {int(c[b[0]])}"
            ),
        )

        lh = left_height(bundle, j)
        ok = lh.in_horizon
        bad = np.flatnonzero(ok & (lh.values != heights[explored]))
        n_checked += int(np.count_nonzero(ok))
        note(
            "left_height", bad.size,
            lambda j=j, b=bad, e=explored, v=lh.values: (
                f"type {j} vertex {int(e[b[0]])}: rebuilt height "
                f"{int(v[b[0]])}, stored {int(heights[e[b[0]]])}"
            ),
        )

        census = np.cumsum(
            np.bincount(dfs.root_heights, minlength=forest.h_max + 1)
        )
        bad = np.flatnonzero(census != bundle.profiles.I[j - 1])
        n_checked += forest.h_max + 1
        note(
            "root_census", bad.size,
            lambda j=j, b=bad, c=census, imm=bundle.profiles.I[j - 1]: (
                f"type {j} height {int(b[0])}: immigrant counter "
                f"{int(imm[b[0]])}, {int(c[b[0]])} component roots"
            ),
        )

    tc = verify_discrete_timechange(bundle)
    n_checked += tc.n_checked
    note(
        "evolution", tc.n_evolution_violations,
        lambda v=tc.first_evolution_violation:
            f"profile recursion broken at (i, j, h) = {v[1:]}",
    )
    note(
        "timechange", tc.n_timechange_violations,
        lambda v=tc.first_timechange_violation:
            f"running-sum substitution broken at (i, j, h) = {v[1:]}",
    )

    return IdentityReport(
        ok=not any(counts.values()),
        n_checked=n_checked,
        counts=counts,
        first=first,
    )


def increment_law_check(
    ensemble,
    j: int,
    replicates: int,
    h_max: int = 12,
    seed=None,
    min_count: int = 100,
) -> float:
    """Chi-square p-value of pooled D^j increments against the diagonal law.

    The increments plus one are the type-j children counts read in
    depth-first order, an i.i.d. stream across replicates, so a pooled
    goodness-of-fit test applies.
    """
    if replicates < 1:
        raise ConfigError("increment_law_check needs at least one replicate")
    rng = as_generator(seed)
    pooled = []
    for forest in generate_forest_batch(ensemble, h_max, replicates, rng):
        path = lukasiewicz_path(forest, j)
        if path.size > 1:
            pooled.append(np.diff(path) + 1)
    values = np.concatenate(pooled) if pooled else np.empty(0, np.int64)
    if values.size < min_count:
        raise ConfigError(
            f"only {values.size} pooled increments, need {min_count}; "
            "raise replicates or h_max"
        )
    observed = np.bincount(values)
    law = ensemble.mu[j - 1][j - 1]
    _, p_value, _ = chi_square_gof(observed, law.pmf_vector(observed.size - 1))
    return p_value


# ---------------------------------------------------------------------------
# export


def _write_series(path: str, values) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(("index", "value"))
        for k, v in enumerate(values):
            out.writerow((k, int(v)))


def export_bundle_csv(bundle: EncodingBundle, outdir: str, seed=None) -> dict:
    """One (index, value) CSV per path per type, plus a manifest JSON."""
    os.makedirs(outdir, exist_ok=True)
    files = []

    def emit(name, values):
        fname = f"{name}.csv"
        _write_series(os.path.join(outdir, fname), values)
        files.append(fname)

    for j in range(1, bundle.n_types + 1):
        te = bundle.types[j - 1]
        emit(f"lukasiewicz_type{j}", te.lukasiewicz)
        emit(f"height_type{j}", te.height)
        emit(f"running_min_type{j}", te.running_min)
        lh = left_height(bundle, j)
        emit(f"left_height_type{j}", lh.values)
        emit(f"profile_type{j}", bundle.profiles.Z[j - 1])
        emit(f"cumulative_type{j}", bundle.profiles.C[j - 1])
        emit(f"immigrants_type{j}", bundle.profiles.I[j - 1])
        emit(f"spine_walk_type{j}", bundle.walks.Y[j - 1])
        for i in range(1, bundle.n_types + 1):
            emit(f"children_walk_type{i}_to_{j}", bundle.walks.X[i - 1][j - 1])
    manifest = {
        "n_types": bundle.n_types,
        "h_max": bundle.h_max,
        "roots": list(bundle.roots),
        "horizons": [int(te.dfs.n_complete) for te in bundle.types],
        "components": [int(te.dfs.n_components) for te in bundle.types],
        "incomplete_components": [
            int(te.dfs.incomplete.sum()) for te in bundle.types
        ],
        "seed": seed,
        "files": files,
    }
    with open(os.path.join(outdir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest
