"""Convergence experiments comparing rescaled discrete statistics with their
continuum counterparts.

Each runner draws replicated discrete statistics from a scaling family,
simulates (or solves for) an independent continuum reference, and returns an
ExperimentReport whose rows keep the raw distances next to the configured
thresholds.  Thresholds are data, not ground truth: they live in the config
block of every report and can be overridden per run.  Reports are replayable,
the same config and seed reproduce every row bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sstats

from .encodings import depth_first_order, height_from_lukasiewicz
from .errors import ConfigError
from .forest import DEFAULT_VERTEX_BUDGET, extend_forest_batch, generate_forest_batch
from .limits import (
    LimitSystem,
    build_root_flow,
    left_height_band_occupation,
    mcbi_sde,
    simulate_height_batch,
)
from .scaling import Mechanism, ScalingFamily
from .seeds import as_generator
from .stats import mean_trajectory, sample_endpoint_and_min
from .walks import population_chain, walk_endpoint_samples, walk_extreme_samples

__all__ = [
    "DEFAULT_THRESHOLDS",
    "MIN_REPLICATES",
    "ExperimentReport",
    "run_profile_convergence",
    "run_height_convergence",
    "run_leftheight_convergence",
    "run_rayknight_check",
    "run_stable_marginal_check",
]

MIN_REPLICATES = 500

# Pilot-calibrated defaults; every report echoes the values it actually used.
DEFAULT_THRESHOLDS = {
    "ks": 0.05,           # marginal KS distance, decoupled or single-type
    "ks_coupled": 0.07,   # marginal KS distance with active cross terms
    "mean_se": 3.0,       # |mean gap| in standard-error units
    "mean_rel": 0.05,     # |mean gap| relative to the reference mean
    "excluded": 0.05,     # horizon-excluded replicate fraction
    "median_band": 0.25,  # |median drift| for heavy-tail walks
}


@dataclass
class ExperimentReport:
    """Rows of named statistics plus the verdict they add up to.

    to_dict() deliberately excludes the runtime so that replaying a
    (config, seed) pair compares equal; save() keeps the timing alongside.
    """

    experiment: str
    config: dict
    rows: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    passed: bool = True
    runtime_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "config": self.config,
            "rows": self.rows,
            "flags": self.flags,
            "passed": self.passed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, default=float)

    def save(self, path) -> None:
        payload = {
            "report": self.to_dict(),
            "timing_seconds": self.runtime_seconds,
        }
        with open(path, "w") as fp:
            json.dump(payload, fp, sort_keys=True, indent=2, default=float)
            fp.write("\n")

    def rows_for(self, statistic: str) -> list:
        return [r for r in self.rows if r["statistic"] == statistic]


def _row(statistic, component, scale, coordinate, value, threshold, n,
         excluded=0.0, note=""):
    return {
        "statistic": str(statistic),
        "component": int(component),
        "scale": int(scale),
        "coordinate": float(coordinate),
        "value": float(value),
        "threshold": float(threshold),
        "passed": bool(value <= threshold),
        "n": int(n),
        "excluded_fraction": float(excluded),
        "note": str(note),
    }


def _check_replicates(replicates: int) -> None:
    if replicates < MIN_REPLICATES:
        raise ConfigError(
            f"need at least {MIN_REPLICATES} replicates for a stable "
            f"distance estimate, got {replicates}"
        )


def _merge_thresholds(overrides) -> dict:
    merged = dict(DEFAULT_THRESHOLDS)
    if overrides:
        for key in overrides:
            if key not in DEFAULT_THRESHOLDS:
                raise ConfigError(f"unknown threshold {key!r}")
        merged.update({k: float(v) for k, v in overrides.items()})
    return merged


def _require_diffusive(family: ScalingFamily) -> None:
    if family.kind != "diffusion":
        raise ConfigError(
            "this check needs a diffusive family; heavy-tail families "
            "belong in run_stable_marginal_check"
        )


def _mechanism_dict(mech: Mechanism) -> dict:
    return {
        "beta": [float(b) for b in mech.beta],
        "alpha": [[float(a) for a in row] for row in mech.alpha],
        "delta": [float(d) for d in mech.delta],
        "x0": [float(x) for x in mech.x0],
    }


def _family_dict(family: ScalingFamily) -> dict:
    return {
        "kind": family.kind,
        "tail_index": float(family.tail_index),
        "coeffs": [float(c) for c in family.coeffs],
        "mechanism": _mechanism_dict(family.mechanism),
    }


def _echo_seed(seed):
    if seed is None or isinstance(seed, (int, np.integer)):
        return None if seed is None else int(seed)
    return repr(seed)


def _ks2(a, b) -> float:
    return float(sstats.ks_2samp(a, b).statistic)


def _grid_index(coordinate: float, dt: float) -> int:
    k = int(round(coordinate / dt))
    if abs(k * dt - coordinate) > 1e-9:
        raise ConfigError(
            f"coordinate {coordinate} does not sit on the dt={dt} grid"
        )
    return k


def _finalize(experiment, config, rows, thresholds, started) -> ExperimentReport:
    """Direction smoke test plus horizon accounting, then the verdict."""
    flags = []
    groups: dict = {}
    for r in rows:
        if r["statistic"].startswith("ks"):
            key = (r["statistic"], r["component"], r["coordinate"])
            groups.setdefault(key, []).append((r["scale"], r["value"]))
    violations = 0
    for key in sorted(groups):
        pairs = sorted(groups[key])
        if pairs[0][0] == pairs[-1][0]:
            continue
        if pairs[-1][1] > pairs[0][1]:
            violations += 1
            flags.append(
                f"{key[0]} for component {key[1]} at {key[2]:g} grew with the "
                f"scale: {pairs[0][1]:.4f} at p={pairs[0][0]} vs "
                f"{pairs[-1][1]:.4f} at p={pairs[-1][0]}"
            )
    horizon_bad = False
    for r in rows:
        if r["excluded_fraction"] >= thresholds["excluded"]:
            horizon_bad = True
            flags.append(
                f"horizon: {r['statistic']} component {r['component']} at "
                f"{r['coordinate']:g} excluded {r['excluded_fraction']:.1%} "
                "of replicates; raise the horizon"
            )
    passed = all(r["passed"] for r in rows) and violations <= 1 and not horizon_bad
    return ExperimentReport(
        experiment=experiment,
        config=config,
        rows=rows,
        flags=flags,
        passed=passed,
        runtime_seconds=time.time() - started,
    )


def _dump_samples(samples_dir, experiment, blocks):
    if samples_dir is None:
        return None
    os.makedirs(samples_dir, exist_ok=True)
    path = os.path.join(samples_dir, f"{experiment}_samples.csv")
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(
            ["statistic", "component", "scale", "coordinate", "replicate", "value"]
        )
        for stat, comp, scale, coord, arr in blocks:
            for i, v in enumerate(np.asarray(arr, dtype=np.float64).ravel()):
                writer.writerow(
                    [stat, comp, scale, f"{coord:g}", i, repr(float(v))]
                )
    return path


# ---------------------------------------------------------------------------
# population profiles against the mass SDE


def run_profile_convergence(family, v_list, p_list, replicates, *, seed=None,
                            dt=1e-3, sde_paths=None, thresholds=None,
                            samples_dir=None) -> ExperimentReport:
    """Rescaled breadth-first censuses against the limiting mass diffusion.

    For each scale p the census at levels [gamma_p v] is replicated and each
    component's empirical law is held against same-level marginals of the
    branching-with-immigration SDE (two-sample KS), plus a moment row in
    standard-error units against the moment ODE for every v > 0.  Rows at
    v = 0 compare the rounded initial masses and pass exactly when x_j p is
    integral.
    """
    started = time.time()
    _check_replicates(replicates)
    _require_diffusive(family)
    v_list = [float(v) for v in v_list]
    p_list = sorted({int(p) for p in p_list})
    if not v_list or not p_list:
        raise ConfigError("v_list and p_list must be non-empty")
    if any(v < 0 for v in v_list):
        raise ConfigError("levels must be >= 0")
    th = _merge_thresholds(thresholds)
    rng = as_generator(seed)
    mech = family.mechanism
    n_types = mech.n_types
    n_sde = int(sde_paths) if sde_paths else int(replicates)
    v_pos = [v for v in v_list if v > 0]

    clamp = 0.0
    cont = {}
    if v_pos:
        sde = mcbi_sde(mech, dt, max(v_pos), rng, n_paths=n_sde)
        clamp = sde.clamp_fraction
        for v in v_pos:
            cont[v] = sde.values[:, :, _grid_index(v, dt)]
    if any(v == 0 for v in v_list):
        cont[0.0] = np.tile(np.asarray(mech.x0, dtype=np.float64), (n_sde, 1))
    ode = {v: mean_trajectory(mech.alpha, mech.delta, mech.x0, v) for v in v_list}

    rows, blocks = [], []
    for p in p_list:
        ens = family.ensemble(p)
        g = family.gamma(p)
        checkpoints = sorted({int(math.floor(g * v)) for v in v_list})
        chain = population_chain(ens, checkpoints, replicates, rng)
        for v in v_list:
            k = checkpoints.index(int(math.floor(g * v)))
            for j in range(1, n_types + 1):
                disc = chain[k, j - 1].astype(np.float64) / p
                rows.append(_row(
                    "ks", j, p, v, _ks2(disc, cont[v][:, j - 1]),
                    th["ks"], replicates,
                ))
                if v > 0:
                    se = disc.std(ddof=1) / math.sqrt(disc.size)
                    gap = abs(disc.mean() - ode[v][j - 1]) / max(se, 1e-300)
                    rows.append(_row(
                        "mean_se", j, p, v, gap, th["mean_se"], replicates,
                    ))
                blocks.append(("profile", j, p, v, disc))

    config = {
        "experiment": "profile_convergence",
        "family": _family_dict(family),
        "v_list": v_list,
        "p_list": p_list,
        "replicates": int(replicates),
        "seed": _echo_seed(seed),
        "dt": float(dt),
        "sde_paths": n_sde,
        "sde_clamp_fraction": float(clamp),
        "thresholds": th,
    }
    _dump_samples(samples_dir, "profile_convergence", blocks)
    return _finalize("profile_convergence", config, rows, th, started)


# ---------------------------------------------------------------------------
# walk marginals against the diffusive height triple


def run_height_convergence(family, t_list, p_list, replicates, *, seed=None,
                           component=1, extremes_replicates=None, dt=1e-3,
                           thresholds=None, samples_dir=None) -> ExperimentReport:
    """Rescaled diagonal-walk marginals against the Brownian height picture.

    Endpoint rows hold (1/p) D([p gamma_p t]) against the exact normal
    marginal; running-minimum rows use the exact joint endpoint/minimum
    sampler; height rows compare (1/gamma_p) H against reflected simulated
    paths, with a relative mean row on top.  Path-resolved statistics are
    capped at extremes_replicates since they materialize whole walks.
    """
    started = time.time()
    _check_replicates(replicates)
    _require_diffusive(family)
    t_list = [float(t) for t in t_list]
    p_list = sorted({int(p) for p in p_list})
    if not t_list or not p_list:
        raise ConfigError("t_list and p_list must be non-empty")
    if any(t < 0 for t in t_list):
        raise ConfigError("times must be >= 0")
    th = _merge_thresholds(thresholds)
    rng = as_generator(seed)
    mech = family.mechanism
    if not 1 <= component <= mech.n_types:
        raise ConfigError(f"component {component} outside 1..{mech.n_types}")
    j = int(component)
    beta = mech.beta[j - 1]
    alpha = mech.alpha[j - 1][j - 1]
    m_ex = max(MIN_REPLICATES,
               min(int(replicates), int(extremes_replicates or 3000)))

    # one reference set per t; it does not depend on the scale
    refs = {}
    for t in t_list:
        if t == 0:
            continue
        end_ref, min_ref = sample_endpoint_and_min(
            rng, 2.0 * beta, alpha, t, size=3 * m_ex
        )
        height_ref = simulate_height_batch(
            beta, alpha, dt, t, rng, 3 * m_ex
        ).height[:, -1]
        refs[t] = (min_ref, height_ref)

    rows, blocks = [], []
    for p in p_list:
        ens = family.ensemble(p)
        g = family.gamma(p)
        law = ens.mu[j - 1][j - 1]
        for t in t_list:
            n = int(math.floor(p * g * t))
            if n == 0:
                note = "no steps before the first level"
                for stat in ("ks_end", "ks_min", "ks_height"):
                    rows.append(_row(stat, j, p, t, 0.0, th["ks"],
                                     replicates, note=note))
                continue
            end = walk_endpoint_samples(law, n, replicates, rng) / p
            ks_end = sstats.kstest(
                end, sstats.norm(loc=alpha * t, scale=math.sqrt(2 * beta * t)).cdf
            ).statistic
            rows.append(_row("ks_end", j, p, t, ks_end, th["ks"], replicates))
            blocks.append(("end", j, p, t, end))

            ex = walk_extreme_samples(law, n, m_ex, rng)
            min_ref, height_ref = refs[t]
            rows.append(_row(
                "ks_min", j, p, t,
                _ks2(ex["min"].astype(np.float64) / p, min_ref),
                th["ks"], m_ex,
            ))
            disc_h = ex["height"].astype(np.float64) / g
            rows.append(_row(
                "ks_height", j, p, t, _ks2(disc_h, height_ref), th["ks"], m_ex,
            ))
            gap = abs(disc_h.mean() - height_ref.mean())
            gap /= max(abs(height_ref.mean()), 1e-300)
            rows.append(_row("mean_rel", j, p, t, gap, th["mean_rel"], m_ex))
            blocks.append(("height", j, p, t, disc_h))

    config = {
        "experiment": "height_convergence",
        "family": _family_dict(family),
        "t_list": t_list,
        "p_list": p_list,
        "replicates": int(replicates),
        "extremes_replicates": m_ex,
        "component": j,
        "seed": _echo_seed(seed),
        "dt": float(dt),
        "thresholds": th,
    }
    _dump_samples(samples_dir, "height_convergence", blocks)
    return _finalize("height_convergence", config, rows, th, started)


# ---------------------------------------------------------------------------
# left heights: discrete forests (or their census surrogate) vs substitution


def _forest_leftheights(forest, j, idx):
    """Height and first-passage shift of the type-j vertices at the given
    depth-first indices.

    Works from the explored prefix only: one DFS, one walk prefix, and the
    component-root census.  Returns (heights, shifts, ok) where ok marks the
    indices the truncated forest can actually answer.
    """
    dfs = depth_first_order(forest, j)
    heights = np.zeros(idx.size, dtype=np.int64)
    shifts = np.zeros(idx.size, dtype=np.int64)
    ok = idx < dfs.n_complete
    if not ok.any():
        return heights, shifts, ok
    top = int(idx[ok].max())
    colors, parents = forest.colors, forest.parents
    tj = np.flatnonzero(colors == j)
    par = parents[tj]
    okp = par[par >= 0]
    own_parents = okp[colors[okp] == j]
    counts = np.bincount(own_parents, minlength=forest.size)
    steps = counts[dfs.order[: top + 1]].astype(np.int64) - 1
    path = np.concatenate(([0], np.cumsum(steps)))
    walk_heights = height_from_lukasiewicz(path)
    running_min = np.minimum.accumulate(path[: top + 1])
    immigrants = np.cumsum(
        np.bincount(dfs.root_heights, minlength=forest.h_max + 1)
    )
    completed = -running_min[idx[ok]]
    # inside the explored prefix the component root is always in range, but
    # keep the guard so a horizon miss shows up as an exclusion, not a lie
    reachable = completed < immigrants[-1]
    sel = np.flatnonzero(ok)[reachable]
    ok = np.zeros(idx.size, dtype=bool)
    ok[sel] = True
    heights[sel] = walk_heights[idx[sel]]
    shifts[sel] = np.searchsorted(immigrants, completed[reachable], side="right")
    return heights, shifts, ok


def _leftheight_forest_engine(ens, n_types, idx, replicates, rng, h_first,
                              h_cap, chunk, max_vertices):
    """Two-phase sampling: generate shallow, extend only the replicates whose
    explored prefix came up short, exclude whatever still misses at the cap."""
    values = {(j, k): [] for j in range(1, n_types + 1) for k in range(idx.size)}
    shifts = {key: [] for key in values}
    excluded = {key: 0 for key in values}
    done = 0
    while done < replicates:
        m = min(chunk, replicates - done)
        batch = generate_forest_batch(ens, h_first, m, rng,
                                      max_vertices=max_vertices)
        ready, retry = [], []
        for forest in batch:
            per = [_forest_leftheights(forest, j, idx)
                   for j in range(1, n_types + 1)]
            if all(p[2].all() for p in per):
                ready.append(per)
            else:
                retry.append(forest)
        if retry:
            for forest in extend_forest_batch(retry, ens, h_cap, rng,
                                              max_vertices=max_vertices):
                ready.append([_forest_leftheights(forest, j, idx)
                              for j in range(1, n_types + 1)])
        for per in ready:
            for j in range(1, n_types + 1):
                h, s, ok = per[j - 1]
                for k in range(idx.size):
                    if ok[k]:
                        values[(j, k)].append(int(h[k] + s[k]))
                        shifts[(j, k)].append(int(s[k]))
                    else:
                        excluded[(j, k)] += 1
        done += m
    return values, shifts, excluded


def _leftheight_chain_engine(ens, n_types, idx, replicates, rng, h_cap):
    """Census surrogate: the exact level census supplies the immigrant counts
    while an independent diagonal walk supplies height and running minimum.
    Marginals of both ingredients are exact; their coupling is not."""
    top = int(idx.max())
    roots = np.asarray(ens.roots, dtype=np.int64)
    state = np.tile(roots, (replicates, 1))
    immigrants = np.empty((replicates, n_types, h_cap + 1), dtype=np.int64)
    immigrants[:, :, 0] = roots
    running = np.tile(roots, (replicates, 1))
    for h in range(1, h_cap + 1):
        new = np.zeros((replicates, n_types), dtype=np.int64)
        influx = np.zeros((replicates, n_types), dtype=np.int64)
        for j in range(n_types):
            arriving = ens.nu[j].sample(rng, replicates).astype(np.int64)
            for i in range(n_types):
                drawn = ens.mu[i][j].sample_sum(rng, state[:, i])
                if i == j:
                    new[:, j] += drawn
                else:
                    arriving += drawn
            new[:, j] += arriving
            influx[:, j] = arriving
        running += influx
        immigrants[:, :, h] = running
        state = new

    values = {(j, k): [] for j in range(1, n_types + 1) for k in range(idx.size)}
    shifts = {key: [] for key in values}
    excluded = {key: 0 for key in values}
    rows_per_chunk = max(1, 20_000_000 // (top + 1))
    for j in range(1, n_types + 1):
        law = ens.mu[j - 1][j - 1]
        done = 0
        while done < replicates:
            m = min(rows_per_chunk, replicates - done)
            steps = law.sample(rng, (m, top + 1)).astype(np.int64) - 1
            walk = np.concatenate(
                [np.zeros((m, 1), dtype=np.int64), np.cumsum(steps, axis=1)],
                axis=1,
            )
            minima = np.minimum.accumulate(walk[:, : top + 1], axis=1)
            for r in range(m):
                heights = height_from_lukasiewicz(walk[r])
                imm = immigrants[done + r, j - 1]
                for k in range(idx.size):
                    completed = int(-minima[r, idx[k]])
                    if completed >= imm[-1]:
                        excluded[(j, k)] += 1
                        continue
                    fp = int(np.searchsorted(imm, completed, side="right"))
                    values[(j, k)].append(int(heights[idx[k]]) + fp)
                    shifts[(j, k)].append(fp)
            done += m
    return values, shifts, excluded


def _leftheight_reference(mech, t_list, n_ref, rng, dt):
    """Continuum left-height and shift samples per component and time.

    With zero cross terms the root flow is the deterministic affine line and
    the joint endpoint/minimum sampler gives the marginal in closed form.
    Otherwise the substitution construction is simulated: independent height
    paths per component, one mass SDE per replicate, first passage of the
    descent through the accumulated root flow.
    """
    n_types = mech.n_types
    cross = np.array(mech.alpha, dtype=np.float64)
    np.fill_diagonal(cross, 0.0)
    out = {}
    if not cross.any():
        for j in range(1, n_types + 1):
            beta, alpha = mech.beta[j - 1], mech.alpha[j - 1][j - 1]
            delta, x = mech.delta[j - 1], mech.x0[j - 1]
            for t in t_list:
                end, mn = sample_endpoint_and_min(
                    rng, 2.0 * beta, alpha, t, size=n_ref
                )
                shift = np.maximum(-mn - x, 0.0) / delta
                out[(j, t)] = ((end - mn) / beta + shift, shift)
        return out, 0

    t_top = max(t_list)
    descent_at, height_at = {}, {}
    ell_max = 0.0
    for j in range(1, n_types + 1):
        hb = simulate_height_batch(
            mech.beta[j - 1], mech.alpha[j - 1][j - 1], dt, t_top, rng, n_ref
        )
        for t in t_list:
            k = _grid_index(t, dt)
            descent_at[(j, t)] = hb.descent[:, k]
            height_at[(j, t)] = hb.height[:, k]
            ell_max = max(ell_max, float(hb.descent[:, k].max()))
    v_need = max(
        (ell_max - mech.x0[j - 1]) / mech.delta[j - 1]
        for j in range(1, n_types + 1)
    ) + 0.5
    sde = mcbi_sde(mech, dt, v_need, rng, n_paths=n_ref)
    flow = build_root_flow(mech, sde.values, dt)
    truncated = 0
    for j in range(1, n_types + 1):
        rowflow = flow[:, j - 1]
        for t in t_list:
            ell = descent_at[(j, t)]
            shift = np.empty(n_ref)
            for i in range(n_ref):
                shift[i] = dt * np.searchsorted(rowflow[i], ell[i], side="right")
            over = ell >= rowflow[:, -1]
            truncated += int(np.count_nonzero(over))
            out[(j, t)] = (height_at[(j, t)] + shift, shift)
    return out, truncated


def run_leftheight_convergence(family, t_list, p, replicates, *, seed=None,
                               engine="forest", h_first=None, h_cap=None,
                               chunk=8, dt=1e-3, reference_paths=None,
                               max_vertices=DEFAULT_VERTEX_BUDGET,
                               thresholds=None,
                               samples_dir=None) -> ExperimentReport:
    """Rescaled left heights against the substitution construction.

    The statistic per component and time is the global height of the
    depth-first vertex [p gamma_p t], rescaled by gamma_p, together with its
    first-passage drift part alone.  engine="forest" samples actual truncated
    forests in two phases (a shallow pass plus targeted extensions up to
    h_cap); engine="chain" swaps in the level-census surrogate whose
    immigrant counts are exact in law but independent of the walk.
    Replicates whose explored prefix still misses the target index at the
    cap are excluded and counted against the horizon budget.
    """
    started = time.time()
    _check_replicates(replicates)
    _require_diffusive(family)
    mech = family.mechanism
    if mech.n_types < 2:
        raise ConfigError("left-height comparison needs at least two types")
    t_list = [float(t) for t in t_list]
    if not t_list or any(t < 0 for t in t_list):
        raise ConfigError("t_list must be non-empty with times >= 0")
    th = _merge_thresholds(thresholds)
    p = int(p)
    g = family.gamma(p)
    ens = family.ensemble(p)
    n_types = mech.n_types
    idx = np.array([int(math.floor(p * g * t)) for t in t_list], dtype=np.int64)
    t_top = max(max(t_list), 0.25)
    h1 = int(h_first) if h_first else int(math.ceil(3.5 * g * math.sqrt(t_top)))
    hc = int(h_cap) if h_cap else int(math.ceil(6.5 * g * math.sqrt(t_top)))
    if hc <= h1:
        raise ConfigError(f"h_cap {hc} must exceed the first horizon {h1}")
    rng = as_generator(seed)

    if engine == "forest":
        values, shifts, excluded = _leftheight_forest_engine(
            ens, n_types, idx, replicates, rng, h1, hc, int(chunk), max_vertices
        )
    elif engine == "chain":
        values, shifts, excluded = _leftheight_chain_engine(
            ens, n_types, idx, replicates, rng, hc
        )
    else:
        raise ConfigError(f"unknown engine {engine!r}")

    n_ref = int(reference_paths) if reference_paths else min(4 * replicates, 20000)
    ref, ref_truncated = _leftheight_reference(mech, t_list, n_ref, rng, dt)

    cross = np.array(mech.alpha, dtype=np.float64)
    np.fill_diagonal(cross, 0.0)
    key = "ks_coupled" if cross.any() else "ks"
    rows, blocks = [], []
    for j in range(1, n_types + 1):
        for k, t in enumerate(t_list):
            disc = np.asarray(values[(j, k)], dtype=np.float64) / g
            disc_shift = np.asarray(shifts[(j, k)], dtype=np.float64) / g
            ref_left, ref_shift = ref[(j, t)]
            frac = excluded[(j, k)] / replicates
            rows.append(_row(
                "ks_left", j, p, t, _ks2(disc, ref_left), th[key],
                disc.size, excluded=frac,
            ))
            rows.append(_row(
                "ks_shift", j, p, t, _ks2(disc_shift, ref_shift), th[key],
                disc.size, excluded=frac,
            ))
            blocks.append(("left", j, p, t, disc))
            blocks.append(("shift", j, p, t, disc_shift))

    config = {
        "experiment": "leftheight_convergence",
        "family": _family_dict(family),
        "t_list": t_list,
        "p": p,
        "replicates": int(replicates),
        "engine": engine,
        "h_first": h1,
        "h_cap": hc,
        "chunk": int(chunk),
        "dt": float(dt),
        "reference_paths": n_ref,
        "reference_truncated": ref_truncated,
        "max_vertices": int(max_vertices),
        "seed": _echo_seed(seed),
        "thresholds": th,
    }
    _dump_samples(samples_dir, "leftheight_convergence", blocks)
    return _finalize("leftheight_convergence", config, rows, th, started)


# ---------------------------------------------------------------------------
# three-way mass comparison: census, occupation estimate, SDE


def run_rayknight_check(family, v_list, p, replicates, *, seed=None, dt=1e-3,
                        band=0.02, occupation_replicates=None,
                        occupation_t_max=2000.0, occupation_dt=2e-5,
                        flow_v_max=None, thresholds=None,
                        samples_dir=None) -> ExperimentReport:
    """Population masses three ways: discrete census, left-height occupation
    density, and the mass SDE.

    At every level v the rescaled census Z([gamma_p v])/p, the band-occupation
    estimate of the left height's local time, and the SDE marginal are
    compared pairwise by KS distance and by relative mean gaps (the SDE mean
    is the denominator).  Bands are centered on each positive level; level 0
    keeps a one-sided band.  The occupation walk is sampled at occupation_dt,
    much finer than the dt level grid, because a reflected walk whose step
    dwarfs the band piles spurious mass onto whichever band the shift is
    sweeping.  Paths that fail to clear every level by occupation_t_max are
    excluded and counted.  At v = 0 all three statistics collapse to the
    initial masses, so only mean rows are emitted there, with an absolute
    tolerance.
    """
    started = time.time()
    _check_replicates(replicates)
    _require_diffusive(family)
    v_list = [float(v) for v in v_list]
    if not v_list or any(v < 0 for v in v_list):
        raise ConfigError("v_list must be non-empty with levels >= 0")
    th = _merge_thresholds(thresholds)
    mech = family.mechanism
    n_types = mech.n_types
    p = int(p)
    g = family.gamma(p)
    ens = family.ensemble(p)
    rng = as_generator(seed)
    cross = np.array(mech.alpha, dtype=np.float64)
    np.fill_diagonal(cross, 0.0)
    key = "ks_coupled" if cross.any() else "ks"

    checkpoints = sorted({int(math.floor(g * v)) for v in v_list})
    chain = population_chain(ens, checkpoints, replicates, rng)

    sde = mcbi_sde(mech, dt, max(max(v_list), dt), rng, n_paths=replicates)
    cont = {}
    for v in v_list:
        if v == 0:
            cont[v] = np.tile(np.asarray(mech.x0, dtype=np.float64),
                              (replicates, 1))
        else:
            cont[v] = sde.values[:, :, _grid_index(v, dt)]

    # occupation estimates: one flow per replicate, batched construction
    m_occ = int(occupation_replicates or max(MIN_REPLICATES, replicates // 2))
    m_occ = min(m_occ, replicates)
    wdt = float(occupation_dt)
    if not 0 < wdt <= band:
        raise ConfigError(f"occupation_dt {wdt} must lie in (0, band]")
    levels = np.asarray(v_list, dtype=np.float64)
    level_bands = np.maximum(levels - band / 2.0, 0.0)
    v_flow = float(flow_v_max or (levels.max() + band) * 2.0 + 1.0)
    occ_sde = mcbi_sde(mech, dt, v_flow, rng, n_paths=m_occ)
    occ_flow = build_root_flow(mech, occ_sde.values, dt)
    stub = [simulate_height_batch(mech.beta[j], mech.alpha[j][j], wdt, wdt,
                                  rng, m_occ) for j in range(n_types)]
    occ = np.zeros((m_occ, n_types, levels.size))
    finished = np.zeros((m_occ, n_types), dtype=bool)
    for r in range(m_occ):
        system = LimitSystem(
            mechanism=mech,
            dt=wdt,
            dv=dt,
            path=np.stack([stub[j].path[r] for j in range(n_types)]),
            height=np.stack([stub[j].height[r] for j in range(n_types)]),
            descent=np.stack([stub[j].descent[r] for j in range(n_types)]),
            mass=occ_sde.values[r],
            root_flow=occ_flow[r],
            clamp_fraction=occ_sde.clamp_fraction,
        )
        for j in range(1, n_types + 1):
            est, fin = left_height_band_occupation(
                system, j, level_bands, band, occupation_t_max, rng
            )
            occ[r, j - 1] = est
            finished[r, j - 1] = fin

    rows, blocks = [], []
    for j in range(1, n_types + 1):
        fin = finished[:, j - 1]
        occ_frac = 1.0 - fin.mean()
        for k, v in enumerate(v_list):
            a = chain[checkpoints.index(int(math.floor(g * v))),
                      j - 1].astype(np.float64) / p
            b = occ[fin, j - 1, k]
            c = cont[v][:, j - 1]
            blocks.append(("census", j, p, v, a))
            blocks.append(("occupation", j, p, v, b))
            if v == 0:
                tol = th["mean_rel"] * max(mech.x0[j - 1], 1.0)
                note = "absolute gap against the initial mass"
                rows.append(_row("mean_census", j, p, v,
                                 abs(a.mean() - mech.x0[j - 1]), tol,
                                 a.size, note=note))
                # the band estimator reads the first band's average local
                # time, which sits O(band) above the boundary point value
                rows.append(_row("mean_occupation", j, p, v,
                                 abs(b.mean() - mech.x0[j - 1]),
                                 tol + 4.0 * band,
                                 b.size, excluded=occ_frac, note=note))
                continue
            denom = max(abs(c.mean()), 1e-300)
            rows.append(_row("ks_census_sde", j, p, v, _ks2(a, c),
                             th[key], replicates))
            rows.append(_row("ks_census_occupation", j, p, v, _ks2(a, b),
                             th[key], b.size, excluded=occ_frac))
            rows.append(_row("ks_occupation_sde", j, p, v, _ks2(b, c),
                             th[key], b.size, excluded=occ_frac))
            rows.append(_row("mean_census_sde", j, p, v,
                             abs(a.mean() - c.mean()) / denom,
                             th["mean_rel"], replicates))
            rows.append(_row("mean_occupation_sde", j, p, v,
                             abs(b.mean() - c.mean()) / denom,
                             th["mean_rel"], b.size, excluded=occ_frac))
            rows.append(_row("mean_census_occupation", j, p, v,
                             abs(a.mean() - b.mean()) / denom,
                             th["mean_rel"], b.size, excluded=occ_frac))

    config = {
        "experiment": "rayknight_check",
        "family": _family_dict(family),
        "v_list": v_list,
        "p": p,
        "replicates": int(replicates),
        "occupation_replicates": m_occ,
        "occupation_t_max": float(occupation_t_max),
        "occupation_dt": wdt,
        "band": float(band),
        "flow_v_max": v_flow,
        "dt": float(dt),
        "sde_clamp_fraction": float(sde.clamp_fraction),
        "seed": _echo_seed(seed),
        "thresholds": th,
    }
    _dump_samples(samples_dir, "rayknight_check", blocks)
    return _finalize("rayknight_check", config, rows, th, started)


# ---------------------------------------------------------------------------
# heavy-tail walk marginals


def run_stable_marginal_check(family, t=1.0, p_list=(200, 350, 500),
                              replicates=10_000, *, seed=None, component=1,
                              grid_points=4096, thresholds=None,
                              samples_dir=None) -> ExperimentReport:
    """Rescaled heavy-tail walk endpoints against the spectrally positive
    stable marginal.

    The reference CDF is evaluated numerically on a quantile-bounded grid
    once per run; the branching coefficient c fixes the stable scale
    (c t |cos(pi alpha / 2)|)^(1/alpha) with skewness pinned at +1.  A
    median row per scale guards against drift blow-up across p.
    """
    started = time.time()
    _check_replicates(replicates)
    if family.kind != "stable":
        raise ConfigError(
            "this check needs a heavy-tail family; diffusive families "
            "belong in run_height_convergence"
        )
    t = float(t)
    if t <= 0:
        raise ConfigError("t must be positive")
    p_list = sorted({int(p) for p in p_list})
    if not p_list:
        raise ConfigError("p_list must be non-empty")
    th = _merge_thresholds(thresholds)
    rng = as_generator(seed)
    alpha = family.tail_index
    if not 1 <= component <= family.mechanism.n_types:
        raise ConfigError(
            f"component {component} outside 1..{family.mechanism.n_types}"
        )
    j = int(component)
    c = family.coeffs[j - 1]
    scale = (c * t * abs(math.cos(math.pi * alpha / 2.0))) ** (1.0 / alpha)
    dist = sstats.levy_stable(alpha, 1.0, loc=0.0, scale=scale)
    lo = float(dist.ppf(1e-7))
    hi = float(dist.ppf(1.0 - 1e-5))
    grid = np.linspace(lo, hi, int(grid_points))
    cdf_grid = dist.cdf(grid)
    median_ref = float(np.interp(0.5, cdf_grid, grid))

    def cdf(x):
        return np.interp(x, grid, cdf_grid, left=0.0, right=1.0)

    rows, blocks = [], []
    for p in p_list:
        ens = family.ensemble(p)
        g = family.gamma(p)
        law = ens.mu[j - 1][j - 1]
        n = int(math.floor(p * g * t))
        end = walk_endpoint_samples(law, n, replicates, rng) / p
        rows.append(_row(
            "ks_end", j, p, t, sstats.kstest(end, cdf).statistic,
            th["ks"], replicates,
        ))
        rows.append(_row(
            "median", j, p, t, abs(float(np.median(end)) - median_ref),
            th["median_band"], replicates,
        ))
        blocks.append(("end", j, p, t, end))

    config = {
        "experiment": "stable_marginal_check",
        "family": _family_dict(family),
        "t": t,
        "p_list": p_list,
        "replicates": int(replicates),
        "component": j,
        "grid_points": int(grid_points),
        "grid_lo": lo,
        "grid_hi": hi,
        "stable_scale": float(scale),
        "median_reference": median_ref,
        "seed": _echo_seed(seed),
        "thresholds": th,
    }
    _dump_samples(samples_dir, "stable_marginal_check", blocks)
    return _finalize("stable_marginal_check", config, rows, th, started)
