"""Offspring and immigration laws on the nonnegative integers.

A `Law` is an immutable value object: exact moments, probability generating
function, vectorized sampling, and (where a closed form exists) vectorized
sampling of n-fold convolution sums.  Sampling always takes an external
`numpy.random.Generator`; the caller owns seeding and concurrency.

Supported kinds:

  dirac(c)            point mass at integer c >= 0
  poisson(lam)        lam >= 0
  geometric(q)        P(k) = q (1-q)^k on {0, 1, ...}, 0 < q <= 1
  binomial(m, q)      m trials, success probability q
  explicit([p0, ...]) finite pmf starting at 0
  moment_mix(m, v)    mixture of dirac(0), dirac(1) and a geometric tail
                      hitting mean m and variance v exactly
  stable_tail(a, amp) pmf amp * k^(-1-a) for k >= 2 with the head at {0, 1}
                      tuned so the mean is exactly 1; heavy-tailed, critical

`moment_mix` is the workhorse diagonal law for diffusion-scaled ensembles
(its n-fold sums reduce to two binomials and one negative binomial), and
`stable_tail` is the heavy-tailed diagonal for the stable-scaled ensembles.
"""

from __future__ import annotations

import ast
import math
import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.typing import NDArray

from .errors import LawError

__all__ = [
    "Law",
    "parse_law",
    "iterate_generating_function",
    "extinction_floor",
]

_KINDS = (
    "dirac",
    "poisson",
    "geometric",
    "binomial",
    "explicit",
    "moment_mix",
    "stable_tail",
)

# Truncation rule for stable_tail supports: keep k while the remaining tail
# probability mass exceeds this bound.
STABLE_TAIL_MASS = 1e-10

# Generic sample_sum fallback materializes every individual draw; refuse
# beyond this many to protect memory.
_SUM_FALLBACK_CAP = 100_000_000


@dataclass(frozen=True)
class Law:
    kind: str
    params: tuple

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise LawError(f"unknown law kind {self.kind!r}")
        object.__setattr__(self, "params", _canonical(self.kind, tuple(self.params)))
        _validate(self)

    # ------------------------------------------------------------------
    # construction helpers

    @staticmethod
    def dirac(c: int) -> "Law":
        return Law("dirac", (int(c),))

    @staticmethod
    def poisson(lam: float) -> "Law":
        return Law("poisson", (float(lam),))

    @staticmethod
    def geometric(q: float) -> "Law":
        return Law("geometric", (float(q),))

    @staticmethod
    def binomial(m: int, q: float) -> "Law":
        return Law("binomial", (int(m), float(q)))

    @staticmethod
    def explicit(probs) -> "Law":
        return Law("explicit", (tuple(float(p) for p in probs),))

    @staticmethod
    def moment_mix(mean: float, variance: float) -> "Law":
        return Law("moment_mix", (float(mean), float(variance)))

    @staticmethod
    def stable_tail(tail_index: float, amplitude: float) -> "Law":
        return Law("stable_tail", (float(tail_index), float(amplitude)))

    # ------------------------------------------------------------------
    # derived parameterizations

    @cached_property
    def _mix(self) -> tuple[float, float, float, float]:
        """moment_mix weights (w0, w1, wg) and geometric success prob s."""
        m, v = self.params
        # minimum achievable variance at mean m <= 1 is m(1-m) (Bernoulli);
        # above m(3-m) the dirac(1) component weight would go negative and
        # the geometric mean must grow instead.
        if v <= m * (3.0 - m):
            wg = 0.5 * (v + m * m - m)
            w1 = m - wg
            w0 = 1.0 - m
            s = 0.5
        else:
            g = 0.5 * (v + m * m - m) / m
            wg = m / g
            w1 = 0.0
            w0 = 1.0 - wg
            s = 1.0 / (1.0 + g)
        for w in (w0, w1, wg):
            if w < -1e-12 or w > 1.0 + 1e-12:
                raise LawError(
                    f"moment_mix(mean={m}, variance={v}) infeasible: "
                    f"weights ({w0:.6g}, {w1:.6g}, {wg:.6g})"
                )
        return (max(w0, 0.0), max(w1, 0.0), max(wg, 0.0), s)

    @cached_property
    def _table(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """(pmf, cumulative pmf) for table-backed kinds."""
        if self.kind == "explicit":
            pmf = np.asarray(self.params[0], dtype=np.float64)
        elif self.kind == "stable_tail":
            a, amp = self.params
            kmax = int(math.ceil((amp / (a * STABLE_TAIL_MASS)) ** (1.0 / a)))
            k = np.arange(2, kmax + 1, dtype=np.float64)
            body = amp * k ** (-1.0 - a)
            s0 = float(body.sum())
            s1 = float((k * body).sum())
            # head masses solve total = 1 and mean = 1 on the truncated
            # support; feasible while the tail carries mean mass <= 1.
            p1 = 1.0 - s1
            p0 = s1 - s0
            if p0 < 0.0 or p1 < 0.0:
                raise LawError(
                    f"stable_tail(a={a}, amplitude={amp}): head masses "
                    f"({p0:.6g}, {p1:.6g}) negative; lower the amplitude"
                )
            pmf = np.concatenate(([p0, p1], body))
        else:
            raise LawError(f"law kind {self.kind} has no pmf table")
        return pmf, np.cumsum(pmf)

    # ------------------------------------------------------------------
    # moments

    def mean(self) -> float:
        kind, p = self.kind, self.params
        if kind == "dirac":
            return float(p[0])
        if kind == "poisson":
            return p[0]
        if kind == "geometric":
            return (1.0 - p[0]) / p[0]
        if kind == "binomial":
            return p[0] * p[1]
        if kind == "moment_mix":
            w0, w1, wg, s = self._mix
            return w1 + wg * (1.0 - s) / s
        pmf, _ = self._table
        return float(pmf @ np.arange(pmf.size))

    def variance(self) -> float:
        kind, p = self.kind, self.params
        if kind == "dirac":
            return 0.0
        if kind == "poisson":
            return p[0]
        if kind == "geometric":
            q = p[0]
            return (1.0 - q) / (q * q)
        if kind == "binomial":
            return p[0] * p[1] * (1.0 - p[1])
        if kind == "moment_mix":
            w0, w1, wg, s = self._mix
            g = (1.0 - s) / s
            second = w1 + wg * (g * (1.0 + g) + g * g)
            return second - self.mean() ** 2
        pmf, _ = self._table
        k = np.arange(pmf.size)
        m = float(pmf @ k)
        return float(pmf @ (k * k)) - m * m

    def pmf_vector(self, kmax: int) -> NDArray[np.float64]:
        """P(X = k) for k = 0..kmax; mass beyond kmax is simply not listed."""
        if kmax < 0:
            raise LawError(f"pmf_vector needs kmax >= 0, got {kmax}")
        out = np.zeros(kmax + 1, dtype=np.float64)
        kind, p = self.kind, self.params
        if kind == "dirac":
            if p[0] <= kmax:
                out[p[0]] = 1.0
        elif kind == "poisson":
            lam = p[0]
            out[0] = math.exp(-lam)
            for k in range(1, kmax + 1):
                out[k] = out[k - 1] * lam / k
        elif kind == "geometric":
            q = p[0]
            out[:] = q * np.exp(np.arange(kmax + 1) * math.log1p(-q)) if q < 1.0 else 0.0
            if q >= 1.0:
                out[0] = 1.0
        elif kind == "binomial":
            n, q = p
            if q >= 1.0:
                if n <= kmax:
                    out[n] = 1.0
            else:
                out[0] = (1.0 - q) ** n
                for k in range(1, min(kmax, n) + 1):
                    out[k] = out[k - 1] * (n - k + 1) / k * q / (1.0 - q)
        elif kind == "moment_mix":
            w0, w1, wg, s = self._mix
            out[:] = wg * s * np.exp(np.arange(kmax + 1) * math.log1p(-s))
            out[0] += w0
            if kmax >= 1:
                out[1] += w1
        else:
            pmf, _ = self._table
            m = min(kmax + 1, pmf.size)
            out[:m] = pmf[:m]
        return out

    # ------------------------------------------------------------------
    # generating function

    def pgf(self, s: float) -> float:
        """E[s^X] for s in [0, 1]."""
        if not 0.0 <= s <= 1.0:
            raise LawError(f"pgf argument {s} outside [0, 1]")
        kind, p = self.kind, self.params
        if kind == "dirac":
            return s ** p[0] if p[0] > 0 else 1.0
        if kind == "poisson":
            return math.exp(p[0] * (s - 1.0))
        if kind == "geometric":
            q = p[0]
            return q / (1.0 - (1.0 - q) * s)
        if kind == "binomial":
            m, q = p
            return (1.0 - q + q * s) ** m
        if kind == "moment_mix":
            w0, w1, wg, sp = self._mix
            return w0 + w1 * s + wg * sp / (1.0 - (1.0 - sp) * s)
        pmf, _ = self._table
        if s == 0.0:
            return float(pmf[0])
        k = np.arange(pmf.size, dtype=np.float64)
        return float(pmf @ np.exp(k * math.log(s))) if s < 1.0 else float(pmf.sum())

    # ------------------------------------------------------------------
    # sampling

    def sample(self, rng: np.random.Generator, size: int) -> NDArray[np.int64]:
        kind, p = self.kind, self.params
        if kind == "dirac":
            return np.full(size, p[0], dtype=np.int64)
        if kind == "poisson":
            if p[0] == 0.0:
                return np.zeros(size, dtype=np.int64)
            return rng.poisson(p[0], size).astype(np.int64, copy=False)
        if kind == "geometric":
            if p[0] >= 1.0:
                return np.zeros(size, dtype=np.int64)
            return rng.geometric(p[0], size).astype(np.int64, copy=False) - 1
        if kind == "binomial":
            return rng.binomial(p[0], p[1], size).astype(np.int64, copy=False)
        if kind == "moment_mix":
            w0, w1, wg, s = self._mix
            u = rng.random(size)
            out = np.zeros(size, dtype=np.int64)
            out[(u >= w0) & (u < w0 + w1)] = 1
            tail = u >= w0 + w1
            ntail = int(tail.sum())
            if ntail and s < 1.0:
                out[tail] = rng.geometric(s, ntail).astype(np.int64) - 1
            return out
        pmf, cum = self._table
        u = rng.random(size)
        idx = np.searchsorted(cum, u, side="right")
        # cum[-1] can sit a hair under 1 (truncation, rounding); clamp
        np.minimum(idx, pmf.size - 1, out=idx)
        return idx.astype(np.int64, copy=False)

    def sample_sum(self, rng: np.random.Generator, n) -> NDArray[np.int64]:
        """Sample sums of n iid draws; n may be a nonnegative integer array.

        Closed-form convolutions are used where available (all parametric
        kinds); table-backed kinds fall back to materializing the draws.
        """
        n = np.asarray(n, dtype=np.int64)
        if n.size and int(n.min()) < 0:
            raise LawError("sample_sum needs nonnegative counts")
        kind, p = self.kind, self.params
        if kind == "dirac":
            return n * p[0]
        if kind == "poisson":
            if p[0] == 0.0:
                return np.zeros_like(n)
            return rng.poisson(p[0] * n).astype(np.int64, copy=False)
        if kind == "binomial":
            return rng.binomial(n * p[0], p[1]).astype(np.int64, copy=False)
        if kind == "geometric":
            return _negbin(rng, n, p[0])
        if kind == "moment_mix":
            w0, w1, wg, s = self._mix
            rest = 1.0 - w1
            ones = rng.binomial(n, w1).astype(np.int64, copy=False) if w1 > 0.0 else np.zeros_like(n)
            if wg == 0.0:
                return ones
            geoms = rng.binomial(n - ones, wg / rest).astype(np.int64, copy=False)
            return ones + _negbin(rng, geoms, s)
        # generic fallback: draw everything and segment-sum
        flat = n.reshape(-1)
        total = int(flat.sum())
        if total > _SUM_FALLBACK_CAP:
            raise LawError(f"sample_sum fallback would draw {total} values")
        draws = self.sample(rng, total)
        cs = np.concatenate(([0], np.cumsum(draws)))
        ends = np.cumsum(flat)
        out = cs[ends] - cs[ends - flat]
        return out.reshape(n.shape)

    # ------------------------------------------------------------------

    def spec_string(self) -> str:
        """Round-trippable text form, the config-file grammar."""
        if self.kind == "explicit":
            inner = "[" + ",".join(repr(p) for p in self.params[0]) + "]"
            return f"explicit({inner})"
        return f"{self.kind}({','.join(repr(p) for p in self.params)})"


def _canonical(kind: str, params: tuple) -> tuple:
    """Coerce params to one canonical type layout so equality and hashing
    don't depend on whether a law came from the constructor or the parser."""
    try:
        if kind == "dirac":
            return (int(params[0]),)
        if kind in ("poisson", "geometric"):
            return (float(params[0]),)
        if kind == "binomial":
            return (int(params[0]), float(params[1]))
        if kind == "explicit":
            return (tuple(float(p) for p in params[0]),)
        return tuple(float(p) for p in params)
    except (TypeError, ValueError, IndexError) as exc:
        raise LawError(f"bad parameters for {kind}: {params!r}") from exc


def _negbin(rng: np.random.Generator, counts: NDArray[np.int64], s: float) -> NDArray[np.int64]:
    """Sum of `counts` iid geometric(s) draws on {0,1,...} (0 where counts=0)."""
    out = np.zeros(counts.shape, dtype=np.int64)
    if s >= 1.0:
        return out
    nz = counts > 0
    if np.any(nz):
        out[nz] = rng.negative_binomial(counts[nz], s).astype(np.int64, copy=False)
    return out


def _validate(law: Law) -> None:
    kind, p = law.kind, law.params
    if kind == "dirac":
        if len(p) != 1 or p[0] < 0:
            raise LawError(f"dirac needs one integer >= 0, got {p}")
    elif kind == "poisson":
        if len(p) != 1 or p[0] < 0.0:
            raise LawError(f"poisson needs one rate >= 0, got {p}")
    elif kind == "geometric":
        if len(p) != 1 or not 0.0 < p[0] <= 1.0:
            raise LawError(f"geometric needs success prob in (0, 1], got {p}")
    elif kind == "binomial":
        if len(p) != 2 or p[0] < 0 or not 0.0 <= p[1] <= 1.0:
            raise LawError(f"binomial needs (trials >= 0, prob in [0,1]), got {p}")
    elif kind == "explicit":
        probs = np.asarray(p[0], dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0 or np.any(probs < 0.0):
            raise LawError("explicit needs a nonempty list of probabilities >= 0")
        total = float(probs.sum())
        if abs(total - 1.0) > 1e-9:
            raise LawError(f"explicit({list(p[0])}) sums to {total:.6g}, not 1")
    elif kind == "moment_mix":
        law._mix  # solves the weights; raises if infeasible
    elif kind == "stable_tail":
        a, amp = p
        if not 1.0 < a < 2.0:
            raise LawError(f"stable_tail index must be in (1, 2), got {a}")
        if amp <= 0.0:
            raise LawError(f"stable_tail amplitude must be > 0, got {amp}")
        law._table  # builds the pmf; raises if head masses go negative


_LAW_RE = re.compile(r"^\s*([a-z_][a-z0-9_]*)\s*\((.*)\)\s*$", re.DOTALL)


def parse_law(text: str) -> Law:
    """Parse the config grammar, e.g. 'poisson(0.9)' or 'explicit([0.2,0.5,0.3])'."""
    m = _LAW_RE.match(text)
    if not m:
        raise LawError(f"cannot parse law spec {text!r}")
    kind, argstr = m.group(1), m.group(2).strip()
    if kind not in _KINDS:
        raise LawError(f"unknown law kind {kind!r} in {text!r}")
    try:
        args = ast.literal_eval(f"({argstr},)") if argstr else ()
    except (ValueError, SyntaxError) as exc:
        raise LawError(f"bad arguments in law spec {text!r}: {exc}") from exc
    return Law(kind, args)


def iterate_generating_function(law: Law, n: int, s: float = 0.0) -> float:
    """n-fold iterate of the generating function evaluated at s (n=0 is s)."""
    if n < 0:
        raise LawError("iteration count must be >= 0")
    value = s
    for _ in range(n):
        value = law.pgf(value)
    return value


def extinction_floor(entries, delta: float):
    """Iterated-generating-function floor along a scale sequence.

    entries: iterable of (p, gamma_p, diagonal law).  For each, computes the
    extinction probability by generation [delta * gamma_p], i.e. the n-fold
    pgf iterate at 0.  Families suitable for height-process limits keep this
    bounded away from zero; a degenerating trend is flagged.

    Returns (rows, degenerate) where rows are (p, n_iterations, value).
    """
    if delta <= 0.0:
        raise LawError("delta must be > 0")
    rows = []
    for p, gamma_p, law in entries:
        n = int(math.floor(delta * gamma_p))
        rows.append((int(p), n, iterate_generating_function(law, n, 0.0)))
    values = [v for _, _, v in rows]
    decreasing = all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
    degenerate = bool(values) and decreasing and values[-1] < 0.05
    return rows, degenerate
