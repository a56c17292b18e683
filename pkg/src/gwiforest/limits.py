"""Continuum objects of the diffusive regime on fixed simulation grids.

The pieces: a drifted Brownian path X with its reflected height
H = (X - min X)/beta and accumulated descent -min X; a branching diffusion
with immigration (one noise per component, full-truncation Euler); the root
flow U^j built by integrating the other components' mass; the left height
H + F(U)(descent) where F is the first-passage inverse; and band-count
local-time estimates with their occupation-identity residual.

The coupled system is sampled by substitution: draw the mass process from
the SDE, build the root flow from it, then attach an independent height
path per component.  A self-consistency pass can re-estimate the local
times of the built left heights and compare them with the mass process
that seeded the construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, HorizonError
from .scaling import Mechanism
from .seeds import as_generator

__all__ = [
    "GridPath",
    "HeightPaths",
    "SdeResult",
    "LampertiResult",
    "DrivingPaths",
    "LimitSystem",
    "LeftHeightPath",
    "InvariantReport",
    "simulate_brownian_height",
    "first_passage_inverse",
    "build_root_flow",
    "mcbi_sde",
    "build_limit_system",
    "build_left_height",
    "shift_by_stieltjes",
    "local_time_field",
    "occupation_residual",
    "left_height_band_occupation",
    "sample_driving_paths",
    "lamperti_solve",
    "system_invariant_report",
    "write_trajectory_csv",
]

try:  # pragma: no cover
    from numba import njit as _njit
except ImportError:  # pragma: no cover
    def _njit(**_kw):
        def wrap(fn):
            return fn

        return wrap


@dataclass(frozen=True, eq=False)
class GridPath:
    dt: float
    values: np.ndarray
    t_max: float

    def __post_init__(self) -> None:
        if self.dt <= 0.0:
            raise ConfigError(f"grid step must be positive, got {self.dt}")
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 1:
            raise ConfigError("a grid path holds a 1-d value sequence")
        want = int(math.floor(self.t_max / self.dt + 1e-9)) + 1
        if vals.size != want:
            raise ConfigError(
                f"path length {vals.size} != floor(t_max/dt)+1 = {want}"
            )
        if not np.all(np.isfinite(vals)):
            raise ConfigError("grid path values must be finite")

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.values.size) * self.dt


@dataclass(frozen=True, eq=False)
class HeightPaths:
    """One component's driving path, reflected height, and descent, batched."""

    dt: float
    path: np.ndarray     # (n_paths, K+1)
    height: np.ndarray
    descent: np.ndarray  # -running min, nondecreasing


@dataclass(frozen=True, eq=False)
class SdeResult:
    dt: float
    values: np.ndarray   # (n_paths, N, K+1)
    clamp_fraction: float


@dataclass(frozen=True, eq=False)
class DrivingPaths:
    """Diagonal driving noise for the time-change solver: per path and
    component, a drifted Brownian grid path started at 0."""

    dt: float
    values: np.ndarray   # (n_paths, N, M+1)


@dataclass(frozen=True, eq=False)
class LampertiResult:
    dt: float
    values: np.ndarray   # (n_paths, N, K+1)
    clamp_fraction: float
    n_extensions: int


@dataclass(frozen=True, eq=False)
class LimitSystem:
    """One replicate of the substitution construction."""

    mechanism: Mechanism
    dt: float            # time grid step (heights)
    dv: float            # level grid step (mass and root flow)
    path: np.ndarray     # (N, Kt+1) driving paths
    height: np.ndarray
    descent: np.ndarray
    mass: np.ndarray     # (N, Kv+1) branching-with-immigration trajectory
    root_flow: np.ndarray
    clamp_fraction: float


@dataclass(frozen=True, eq=False)
class LeftHeightPath:
    values: np.ndarray   # height + shift over the valid prefix
    shift: np.ndarray    # first-passage drift term, same length
    n_valid: int
    truncated: bool


def _steps(t_max: float, dt: float) -> int:
    if dt <= 0.0:
        raise ConfigError(f"grid step must be positive, got {dt}")
    if t_max < dt:
        raise ConfigError(f"horizon {t_max} shorter than one step {dt}")
    return int(math.floor(t_max / dt + 1e-9))


# ---------------------------------------------------------------------------
# heights


def _height_batch(beta, alpha_diag, dt, n_steps, rng, n_paths):
    if beta <= 0.0:
        raise ConfigError(f"diffusion coefficient must be positive, got {beta}")
    inc = rng.standard_normal((n_paths, n_steps)) * math.sqrt(2.0 * beta * dt)
    inc += alpha_diag * dt
    path = np.concatenate(
        [np.zeros((n_paths, 1)), np.cumsum(inc, axis=1)], axis=1
    )
    running_min = np.minimum.accumulate(path, axis=1)
    height = (path - running_min) / beta
    return path, height, -running_min


def simulate_brownian_height(beta_j, alpha_jj, dt, t_max, rng):
    """One component height system: X, H = (X - min X)/beta, and the descent."""
    rng = as_generator(rng)
    n_steps = _steps(t_max, dt)
    path, height, descent = _height_batch(beta_j, alpha_jj, dt, n_steps, rng, 1)

    def mk(v):
        return GridPath(dt=dt, values=v[0], t_max=t_max)

    return mk(path), mk(height), mk(descent)


def simulate_height_batch(beta_j, alpha_jj, dt, t_max, rng, n_paths) -> HeightPaths:
    rng = as_generator(rng)
    n_steps = _steps(t_max, dt)
    path, height, descent = _height_batch(
        beta_j, alpha_jj, dt, n_steps, rng, n_paths
    )
    return HeightPaths(dt=dt, path=path, height=height, descent=descent)


# ---------------------------------------------------------------------------
# first passage


def _require_nondecreasing(values, what: str):
    if values.size and float(np.diff(values).min(initial=0.0)) < -1e-12:
        raise ConfigError(f"{what} must be nondecreasing")


def first_passage_inverse(path: GridPath, levels):
    """F(f)(level) = first grid time with f strictly above the level.

    Returns (times, in_horizon); levels at or beyond the path's final value
    never pass and come back NaN with the flag cleared.
    """
    levels = np.atleast_1d(np.asarray(levels, dtype=np.float64))
    vals = path.values
    _require_nondecreasing(vals, "first-passage input")
    idx = np.searchsorted(vals, levels, side="right")
    in_horizon = levels < vals[-1]
    times = np.where(in_horizon, idx * path.dt, np.nan)
    return times, in_horizon


# ---------------------------------------------------------------------------
# mass process and root flow


def mcbi_sde(mechanism: Mechanism, dt, v_max, rng, n_paths: int = 1) -> SdeResult:
    """Branching diffusion with immigration, full-truncation Euler.

    d mass^j = sqrt(2 beta_j mass^j) dW^j + (delta_j + sum_i alpha_ij mass^i) dv
    started from x0.  The square root reads max(mass, 0) and any state pushed
    negative is clamped back to 0; the clamped fraction of (step, path,
    component) entries is reported.
    """
    n_steps = _steps(v_max, dt)
    rng = as_generator(rng)
    n = mechanism.n_types
    beta = np.asarray(mechanism.beta)
    if np.any(beta <= 0.0):
        raise ConfigError("the diffusive mass process needs beta > 0 per type")
    alpha = np.asarray(mechanism.alpha)
    delta = np.asarray(mechanism.delta)
    state = np.tile(np.asarray(mechanism.x0), (n_paths, 1))
    out = np.empty((n_paths, n, n_steps + 1))
    out[:, :, 0] = state
    sdt = math.sqrt(dt)
    clamped = 0
    for k in range(1, n_steps + 1):
        drift = delta + state @ alpha
        noise = rng.standard_normal((n_paths, n))
        state = (
            state
            + drift * dt
            + np.sqrt(2.0 * beta * np.maximum(state, 0.0)) * sdt * noise
        )
        neg = state < 0.0
        clamped += int(np.count_nonzero(neg))
        np.maximum(state, 0.0, out=state)
        out[:, :, k] = state
    return SdeResult(
        dt=dt,
        values=out,
        clamp_fraction=clamped / float(n_paths * n * n_steps),
    )


def build_root_flow(mechanism: Mechanism, mass_values, dv) -> np.ndarray:
    """U^j(v) = x_j + delta_j v + sum_{i != j} alpha_ij * integral of mass^i.

    mass_values has shape (..., N, K+1) on a dv level grid; the integral is
    a cumulative trapezoid.  Since delta > 0 the result is strictly
    increasing with slope at least delta_j.
    """
    mass = np.asarray(mass_values, dtype=np.float64)
    if mass.shape[-2] != mechanism.n_types:
        raise ConfigError(
            f"mass trajectory has {mass.shape[-2]} components, "
            f"mechanism wants {mechanism.n_types}"
        )
    if dv <= 0.0:
        raise ConfigError(f"level step must be positive, got {dv}")
    pads = [(0, 0)] * (mass.ndim - 1) + [(1, 0)]
    cum = np.pad(
        np.cumsum((mass[..., 1:] + mass[..., :-1]) * (0.5 * dv), axis=-1),
        pads,
    )
    cross = np.array(mechanism.alpha)
    np.fill_diagonal(cross, 0.0)
    # flow[..., j, :] = x_j + delta_j v + sum_i cross[i, j] cum[..., i, :]
    flow = np.einsum("ij,...ik->...jk", cross, cum)
    grid = np.arange(mass.shape[-1]) * dv
    delta = np.asarray(mechanism.delta)
    x0 = np.asarray(mechanism.x0)
    flow += x0[:, None] + delta[:, None] * grid
    return flow


def build_limit_system(
    mechanism: Mechanism, dt, t_max, dv, v_max, rng
) -> LimitSystem:
    """One replicate of the substitution construction: mass from the SDE,
    root flow from the mass, an independent height path per component."""
    rng = as_generator(rng)
    sde = mcbi_sde(mechanism, dv, v_max, rng, n_paths=1)
    mass = sde.values[0]
    flow = build_root_flow(mechanism, mass, dv)
    n_steps = _steps(t_max, dt)
    paths, heights, descents = [], [], []
    for j in range(mechanism.n_types):
        p, h, d = _height_batch(
            mechanism.beta[j], mechanism.alpha[j][j], dt, n_steps, rng, 1
        )
        paths.append(p[0])
        heights.append(h[0])
        descents.append(d[0])
    return LimitSystem(
        mechanism=mechanism,
        dt=dt,
        dv=dv,
        path=np.stack(paths),
        height=np.stack(heights),
        descent=np.stack(descents),
        mass=mass,
        root_flow=flow,
        clamp_fraction=sde.clamp_fraction,
    )


def build_left_height(system: LimitSystem, j: int) -> LeftHeightPath:
    """Left height of component j: height plus the first passage of the root
    flow above the accumulated descent.  Once the descent leaves the root
    flow's simulated range the remaining times are truncated and flagged."""
    n = system.mechanism.n_types
    if not 1 <= j <= n:
        raise ConfigError(f"type {j} outside 1..{n}")
    flow = system.root_flow[j - 1]
    descent = system.descent[j - 1]
    n_valid = int(np.searchsorted(descent, flow[-1], side="left"))
    idx = np.searchsorted(flow, descent[:n_valid], side="right")
    shift = idx * system.dv
    return LeftHeightPath(
        values=system.height[j - 1][:n_valid] + shift,
        shift=shift,
        n_valid=n_valid,
        truncated=n_valid < descent.size,
    )


def shift_by_stieltjes(system: LimitSystem, j: int) -> np.ndarray:
    """Verification-only form of the left-height shift.

    Integrates d(descent) against the reciprocal slope of the root flow,
    consuming each flow cell exactly (the density form of the same first
    passage, evaluated by forward accumulation instead of binary search).
    Beyond the flow's simulated range the last cell's slope extrapolates.
    """
    n = system.mechanism.n_types
    if not 1 <= j <= n:
        raise ConfigError(f"type {j} outside 1..{n}")
    descent = system.descent[j - 1]
    flow = system.root_flow[j - 1]
    dv = system.dv
    last = flow.size - 2
    out = np.zeros_like(descent)
    shift = 0.0
    level = flow[0]  # descent consumed so far, = flow value at the shift
    for k in range(1, descent.size):
        target = descent[k]
        while level < target:
            cell = min(int(shift / dv + 1e-12), last)
            slope = (flow[cell + 1] - flow[cell]) / dv
            if cell < last and target >= flow[cell + 1]:
                shift = (cell + 1) * dv  # consume the cell, snap to its edge
                level = flow[cell + 1]
            else:
                shift += (target - level) / slope
                level = target
        out[k] = shift
    return out


# ---------------------------------------------------------------------------
# local time


def local_time_field(path, levels, band, dt=None):
    """Band-count local-time estimates: (1/band) * time spent in (v, v+band].

    path is a GridPath or a plain value array with dt supplied.
    """
    if isinstance(path, GridPath):
        values, dt = path.values, path.dt
    else:
        values = np.asarray(path, dtype=np.float64)
        if dt is None:
            raise ConfigError("plain arrays need an explicit dt")
    if band < dt:
        raise ConfigError(
            f"band {band} under-resolves the grid step {dt}; widen the band"
        )
    levels = np.atleast_1d(np.asarray(levels, dtype=np.float64))
    sorted_vals = np.sort(values)
    hi = np.searchsorted(sorted_vals, levels + band, side="right")
    lo = np.searchsorted(sorted_vals, levels, side="right")
    return (hi - lo) * (dt / band)


def occupation_residual(path, levels, band, g, dt=None) -> float:
    """| time-integral of g(path) - level-integral of g against the field |.

    levels must be a uniform grid wide enough to cover the path's range;
    the residual shrinks as (dt, band, grid spacing) refine together.
    """
    if isinstance(path, GridPath):
        values, dt = path.values, path.dt
    else:
        values = np.asarray(path, dtype=np.float64)
        if dt is None:
            raise ConfigError("plain arrays need an explicit dt")
    levels = np.atleast_1d(np.asarray(levels, dtype=np.float64))
    if levels.size < 2:
        raise ConfigError("occupation residual needs a level grid")
    spacing = np.diff(levels)
    if not np.allclose(spacing, spacing[0], rtol=1e-9, atol=1e-12):
        raise ConfigError("occupation residual needs uniform level spacing")
    field = local_time_field(values, levels, band, dt=dt)
    lhs = float(np.sum(g(values)) * dt)
    rhs = float(np.sum(g(levels) * field) * spacing[0])
    return abs(lhs - rhs)


_RAN_OUT = 0      # chunk consumed, keep walking
_CLEARED = 1      # shift passed every level, occupation complete
_FLOW_SHORT = 2   # root flow horizon exhausted before clearing


@_njit(cache=True)
def _band_occupation_kernel(increments, beta, flow_vals, dv, levels, band, top,
                            x, rmin, ptr, occ):
    """Fused walk over one chunk: drifted path, running min, first-passage
    pointer into the root flow, band counts of the left height.  Carries
    (x, rmin, ptr) across chunks; occ accumulates in place."""
    m = flow_vals.size
    for k in range(increments.size):
        x += increments[k]
        if x < rmin:
            rmin = x
            while ptr < m and flow_vals[ptr] <= -rmin:
                ptr += 1
            if ptr >= m:
                return x, rmin, ptr, _FLOW_SHORT
            if ptr * dv > top:
                return x, rmin, ptr, _CLEARED
        value = (x - rmin) / beta + ptr * dv
        for li in range(levels.size):
            if levels[li] < value <= levels[li] + band:
                occ[li] += 1.0
    return x, rmin, ptr, _RAN_OUT


_BAND_CHUNK = 65536


def left_height_band_occupation(
    system: LimitSystem, j: int, levels, band, t_max, rng
):
    """Local-time estimates of component j's left height at the given levels.

    Walks a fresh height path up to t_max (the system's stored horizon is
    usually far shorter than occupation needs), counting band hits on the
    fly and stopping once the shift clears every level.  Returns
    (estimates, finished): finished means the counts are complete.
    """
    n = system.mechanism.n_types
    if not 1 <= j <= n:
        raise ConfigError(f"type {j} outside 1..{n}")
    if band < system.dt:
        raise ConfigError(f"band {band} under-resolves the grid step {system.dt}")
    levels = np.atleast_1d(np.asarray(levels, dtype=np.float64))
    rng = as_generator(rng)
    beta = system.mechanism.beta[j - 1]
    alpha_jj = system.mechanism.alpha[j - 1][j - 1]
    scale = math.sqrt(2.0 * beta * system.dt)
    drift = alpha_jj * system.dt
    flow = system.root_flow[j - 1]
    top = float(levels.max()) + band
    occ = np.zeros(levels.size)
    remaining = _steps(t_max, system.dt)
    x, rmin, ptr = 0.0, 0.0, 0
    status = _RAN_OUT
    while remaining > 0 and status == _RAN_OUT:
        chunk = min(_BAND_CHUNK, remaining)
        increments = rng.standard_normal(chunk) * scale
        if drift != 0.0:
            increments += drift
        x, rmin, ptr, status = _band_occupation_kernel(
            increments, beta, flow, system.dv, levels, band, top,
            x, rmin, ptr, occ,
        )
        remaining -= chunk
    return occ * (system.dt / band), status == _CLEARED


# ---------------------------------------------------------------------------
# time-change solution


def sample_driving_paths(
    mechanism: Mechanism, t_max, dt, rng, n_paths: int
) -> DrivingPaths:
    """Diagonal driving paths for the time-change solver: per component j a
    Brownian path with variance rate 2 beta_j and drift alpha_jj."""
    rng = as_generator(rng)
    n_steps = _steps(t_max, dt)
    n = mechanism.n_types
    beta = np.asarray(mechanism.beta)
    if np.any(beta <= 0.0):
        raise ConfigError("driving paths need beta > 0 per type")
    diag = np.array([mechanism.alpha[j][j] for j in range(n)])
    inc = rng.standard_normal((n_paths, n, n_steps))
    inc *= np.sqrt(2.0 * beta * dt)[None, :, None]
    inc += (diag * dt)[None, :, None]
    vals = np.concatenate(
        [np.zeros((n_paths, n, 1)), np.cumsum(inc, axis=2)], axis=2
    )
    return DrivingPaths(dt=dt, values=vals)


def _extend_driving(driving: DrivingPaths, mechanism, rng) -> DrivingPaths:
    vals = driving.values
    n_paths, n, m = vals.shape
    add = m - 1  # double the horizon
    beta = np.asarray(mechanism.beta)
    diag = np.array([mechanism.alpha[j][j] for j in range(n)])
    inc = rng.standard_normal((n_paths, n, add))
    inc *= np.sqrt(2.0 * beta * driving.dt)[None, :, None]
    inc += (diag * driving.dt)[None, :, None]
    tail = vals[:, :, -1:] + np.cumsum(inc, axis=2)
    return DrivingPaths(dt=driving.dt, values=np.concatenate([vals, tail], axis=2))


def lamperti_solve(
    mechanism: Mechanism,
    driving: DrivingPaths,
    dt,
    v_max,
    rng=None,
    extend: bool = True,
    max_extensions: int = 12,
) -> LampertiResult:
    """Solve the time-change equation forward:

        mass^j(v) = x_j + X^jj(C^j(v)) + sum_{i!=j} alpha_ij C^i(v) + delta_j v
        C^i advances by mass^i dv.

    Diagonal driving values are read by linear interpolation; off-diagonal
    drivers are the deterministic lines alpha_ij t, evaluated exactly.  If a
    time change runs past the driving horizon the paths are extended with
    fresh noise when extend is set (needs rng), otherwise the run fails.
    """
    n_steps = _steps(v_max, dt)
    n = mechanism.n_types
    vals = driving.values
    if vals.ndim != 3 or vals.shape[1] != n:
        raise ConfigError("driving paths must be shaped (paths, types, grid)")
    n_paths = vals.shape[0]
    cross = np.array(mechanism.alpha)
    np.fill_diagonal(cross, 0.0)
    delta = np.asarray(mechanism.delta)
    x0 = np.asarray(mechanism.x0)
    dtd = driving.dt
    state = np.tile(x0, (n_paths, 1))
    change = np.zeros((n_paths, n))
    out = np.empty((n_paths, n, n_steps + 1))
    out[:, :, 0] = state
    rows = np.arange(n_paths)[:, None]
    cols = np.arange(n)[None, :]
    clamped = 0
    n_extensions = 0
    for k in range(1, n_steps + 1):
        change = change + state * dt
        pos = change / dtd
        while pos.max() >= vals.shape[2] - 1:
            if not extend:
                raise HorizonError(
                    "time change ran past the driving horizon; extend it or "
                    "start with a longer one"
                )
            if rng is None:
                raise HorizonError(
                    "driving-path extension needs a generator; pass rng"
                )
            if n_extensions >= max_extensions:
                raise HorizonError(
                    f"driving paths doubled {n_extensions} times and the time "
                    "change still escapes; the configuration looks unstable"
                )
            driving = _extend_driving(driving, mechanism, as_generator(rng))
            vals = driving.values
            n_extensions += 1
        i0 = pos.astype(np.int64)
        frac = pos - i0
        left = vals[rows, cols, i0]
        right = vals[rows, cols, i0 + 1]
        diag_read = left * (1.0 - frac) + right * frac
        state = x0 + diag_read + change @ cross + delta * (k * dt)
        neg = state < 0.0
        clamped += int(np.count_nonzero(neg))
        np.maximum(state, 0.0, out=state)
        out[:, :, k] = state
    return LampertiResult(
        dt=dt,
        values=out,
        clamp_fraction=clamped / float(n_paths * n * n_steps),
        n_extensions=n_extensions,
    )


# ---------------------------------------------------------------------------
# invariants


@dataclass(frozen=True)
class InvariantReport:
    descent_monotone: bool
    root_flow_monotone: bool
    root_flow_slope_ok: bool
    shift_monotone: bool
    stieltjes_shift_monotone: bool
    left_dominates_height: bool
    flat_before_first_passage: bool
    mass_nonnegative: bool

    @property
    def ok(self) -> bool:
        return all(getattr(self, f) for f in self.__dataclass_fields__)


def system_invariant_report(system: LimitSystem, tol: float = 1e-9) -> InvariantReport:
    """Structural checks every simulated replicate must satisfy."""
    n = system.mechanism.n_types
    delta = np.asarray(system.mechanism.delta)
    descent_ok = all(
        np.all(np.diff(system.descent[j]) >= -tol) for j in range(n)
    )
    flow_ok = all(
        np.all(np.diff(system.root_flow[j]) >= -tol) for j in range(n)
    )
    slope_ok = all(
        np.all(np.diff(system.root_flow[j]) / system.dv >= delta[j] - tol)
        for j in range(n)
    )
    shift_ok = True
    stieltjes_ok = True
    dominates = True
    flat_ok = True
    for j in range(1, n + 1):
        lh = build_left_height(system, j)
        shift_ok &= bool(np.all(np.diff(lh.shift) >= 0))
        stj = shift_by_stieltjes(system, j)
        stieltjes_ok &= bool(np.all(np.diff(stj) >= -tol))
        h = system.height[j - 1][: lh.n_valid]
        dominates &= bool(np.all(lh.values >= h - tol))
        before = system.descent[j - 1][: lh.n_valid] < system.mechanism.x0[j - 1]
        flat_ok &= bool(np.all(lh.shift[before] == 0.0))
    return InvariantReport(
        descent_monotone=descent_ok,
        root_flow_monotone=flow_ok,
        root_flow_slope_ok=slope_ok,
        shift_monotone=shift_ok,
        stieltjes_shift_monotone=stieltjes_ok,
        left_dominates_height=dominates,
        flat_before_first_passage=flat_ok,
        mass_nonnegative=bool(np.all(system.mass >= 0.0)),
    )


def write_trajectory_csv(path, values, step, names=None) -> None:
    """CSV export of a trajectory: time column plus one column per component."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if names is None:
        names = [f"component_{j + 1}" for j in range(values.shape[0])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["time", *names])
        for k in range(values.shape[1]):
            out.writerow([k * step, *(float(v) for v in values[:, k])])
