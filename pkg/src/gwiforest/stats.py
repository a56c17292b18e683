"""Statistical utilities: distribution distances and closed-form oracles.

Thin wrappers over scipy where scipy already does the job (KS statistics,
chi-square, stable densities, matrix exponentials), plus the closed forms
this package checks simulations against: reflected-Brownian moments,
half-normal marginals, linear moment flows, and an exact joint sampler for
a Brownian endpoint together with its running minimum.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.typing import NDArray
from scipy import stats as sps
from scipy.linalg import expm

from .errors import ConfigError

__all__ = [
    "ks_distance",
    "ks_distance_cdf",
    "chi_square_gof",
    "normal_marginal",
    "height_marginal",
    "running_min_marginal",
    "expected_running_min",
    "stable_positive_marginal",
    "gridded_cdf",
    "hill_tail_index",
    "mean_trajectory",
    "sample_endpoint_and_min",
]


# ---------------------------------------------------------------------------
# distances


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    return float(sps.ks_2samp(np.asarray(a), np.asarray(b), method="asymp").statistic)


def ks_distance_cdf(samples, cdf) -> float:
    """One-sample KS statistic of `samples` against a cdf callable."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    if n == 0:
        raise ConfigError("KS distance needs at least one sample")
    f = np.asarray(cdf(x), dtype=np.float64)
    grid = np.arange(1, n + 1) / n
    return float(max(np.max(grid - f), np.max(f - (grid - 1.0 / n))))


def chi_square_gof(observed_counts, probs, min_expected: float = 5.0):
    """Goodness of fit of integer counts against pmf values.

    observed_counts[k] tallies value k; probs[k] is the model pmf there,
    with any remaining mass implied beyond the last entry.  Cells are pooled
    from the tail until every expected count reaches min_expected.
    Returns (statistic, p_value, n_cells).
    """
    obs = np.asarray(observed_counts, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if obs.ndim != 1 or p.ndim != 1:
        raise ConfigError("chi_square_gof needs 1-d counts and probabilities")
    k = max(obs.size, p.size) + 1
    obs = np.pad(obs, (0, k - obs.size))
    p = np.pad(p, (0, k - p.size))
    p[-1] += max(0.0, 1.0 - p.sum())  # implied tail mass
    total = obs.sum()
    if total <= 0:
        raise ConfigError("chi_square_gof needs a nonempty sample")
    exp = total * p
    # pool from the right until the tail cell is heavy enough
    while exp.size > 2 and (exp[-1] < min_expected or obs[-1] == 0 and exp[-1] == 0):
        exp[-2] += exp[-1]
        obs[-2] += obs[-1]
        exp, obs = exp[:-1], obs[:-1]
    keep = exp > 0
    if np.any(obs[~keep] > 0):
        # observed values the law gives zero mass: impossible fit
        return float("inf"), 0.0, int(keep.sum() + 1)
    exp, obs = exp[keep], obs[keep]
    if obs.size <= 1:
        # everything pooled into one cell: the law is degenerate here and the
        # sample matches it by construction
        return 0.0, 1.0, int(obs.size)
    exp *= obs.sum() / exp.sum()  # renormalize away rounding
    stat, pval = sps.chisquare(obs, exp)
    return float(stat), float(pval), int(obs.size)


# ---------------------------------------------------------------------------
# closed-form marginals (diffusion scaling)


def normal_marginal(mean: float, var: float):
    """Frozen Normal(mean, var)."""
    if var <= 0:
        raise ConfigError("normal_marginal needs var > 0")
    return sps.norm(loc=mean, scale=math.sqrt(var))


def height_marginal(beta: float, t: float):
    """Law of (X_t - min X)/beta for X = sqrt(2 beta) B: |N(0, 2 beta t)|/beta."""
    if beta <= 0 or t <= 0:
        raise ConfigError("height_marginal needs beta > 0 and t > 0")
    return sps.halfnorm(scale=math.sqrt(2.0 * beta * t) / beta)


def running_min_marginal(beta: float, t: float):
    """Law of -min_{s<=t} sqrt(2 beta) B_s: |N(0, 2 beta t)| by reflection."""
    if beta <= 0 or t <= 0:
        raise ConfigError("running_min_marginal needs beta > 0 and t > 0")
    return sps.halfnorm(scale=math.sqrt(2.0 * beta * t))


def expected_running_min(beta: float, t: float) -> float:
    """E[-min_{s<=t} sqrt(2 beta) B_s] = sqrt(2 beta) sqrt(2 t / pi)."""
    return math.sqrt(2.0 * beta) * math.sqrt(2.0 * t / math.pi)


def stable_positive_marginal(alpha: float, coeff: float, t: float = 1.0):
    """Spectrally positive stable law with E exp(-u X_t) = exp(t c u^alpha).

    Mapped onto scipy's levy_stable: skew 1, zero shift, scale chosen so the
    Laplace exponents agree (scale^alpha / |cos(pi alpha / 2)| = c t).
    """
    if not 1.0 < alpha < 2.0:
        raise ConfigError(f"stable index must be in (1, 2), got {alpha}")
    if coeff <= 0 or t <= 0:
        raise ConfigError("stable_positive_marginal needs coeff > 0 and t > 0")
    scale = (coeff * t * abs(math.cos(math.pi * alpha / 2.0))) ** (1.0 / alpha)
    return sps.levy_stable(alpha, 1.0, loc=0.0, scale=scale)


def gridded_cdf(dist, lo: float, hi: float, n: int = 2001):
    """Tabulate dist.cdf once on a grid and return a fast interpolating cdf.

    scipy's heavy-tailed cdfs integrate numerically per point; experiments
    evaluating them at 1e4 sample points go through this table instead.
    """
    grid = np.linspace(lo, hi, n)
    table = np.asarray(dist.cdf(grid), dtype=np.float64)
    table = np.maximum.accumulate(np.clip(table, 0.0, 1.0))

    def cdf(x):
        x = np.asarray(x, dtype=np.float64)
        out = np.interp(x, grid, table, left=table[0], right=table[-1])
        return out

    return cdf


def hill_tail_index(samples, k: int) -> float:
    """Hill estimator of the tail exponent from the top k order statistics."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    if k < 2 or k >= x.size:
        raise ConfigError("hill_tail_index needs 2 <= k < len(samples)")
    top = x[-k:]
    floor = x[-k - 1]
    if floor <= 0:
        raise ConfigError("hill_tail_index needs positive order statistics")
    return float(1.0 / np.mean(np.log(top / floor)))


# ---------------------------------------------------------------------------
# moment flow


def mean_trajectory(alpha, delta, x0, v) -> NDArray[np.float64]:
    """Mean of the limiting population at time v: solves m' = delta + A^T m.

    alpha is the (i, j) interaction matrix (column j receives from row i),
    delta the immigration rates, x0 the initial masses.  Handled through one
    augmented matrix exponential so a singular interaction matrix needs no
    special casing.  Returns the mean vector at v (or stacked rows when v is
    an array).
    """
    a = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    d = np.atleast_1d(np.asarray(delta, dtype=np.float64))
    x = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    n = d.size
    if a.shape != (n, n) or x.size != n:
        raise ConfigError("mean_trajectory: inconsistent dimensions")
    gen = np.zeros((n + 1, n + 1))
    gen[:n, :n] = a.T
    gen[:n, n] = d
    state = np.concatenate([x, [1.0]])
    vs = np.atleast_1d(np.asarray(v, dtype=np.float64))
    out = np.empty((vs.size, n))
    for idx, vv in enumerate(vs):
        out[idx] = (expm(gen * vv) @ state)[:n]
    return out[0] if np.isscalar(v) or np.ndim(v) == 0 else out


# ---------------------------------------------------------------------------
# exact Brownian endpoint/minimum sampler


def sample_endpoint_and_min(
    rng: np.random.Generator,
    var_rate: float,
    drift: float,
    t: float,
    size: int,
):
    """Exact joint draw of (X_t, min_{s<=t} X_s) for X = sigma B + drift s.

    The endpoint is Gaussian; given the endpoint y, the bridge minimum has
    the Levy tail P(min <= a | X_t = y) = exp(-2 a (a - y) / (sigma^2 t)),
    inverted in closed form.  Drift only enters through the endpoint.
    """
    if var_rate <= 0 or t <= 0:
        raise ConfigError("sample_endpoint_and_min needs var_rate > 0, t > 0")
    s2t = var_rate * t
    y = rng.normal(drift * t, math.sqrt(s2t), size)
    u = 1.0 - rng.random(size)  # in (0, 1], keeps the log finite
    m = 0.5 * (y - np.sqrt(y * y - 2.0 * s2t * np.log(u)))
    return y, m
