"""Mechanisms and the discrete scaling families that realize them.

A `Mechanism` holds the continuum parameters: per-type diffusion
coefficients beta_j, an interaction matrix alpha[i][j] (off-diagonal
entries are birth rates of type j from type i, the diagonal is a drift),
immigration rates delta_j and initial masses x_j.

A scaling family maps a scale index p to an `OffspringEnsemble`: the
N x N offspring laws, the N immigration laws of the color-0 spine, and
the root counts.  Two families are provided:

  * diffusion scaling (gamma_p = p): diagonal laws hit mean 1 + alpha_jj/p
    and variance 2 beta_j exactly; off-diagonals and immigration are
    Poisson with means alpha_ij/gamma_p and delta_j p/gamma_p.
  * heavy-tail scaling (gamma_p = floor(p^(a-1)) for tail index a): the
    diagonal is the critical power-tail law whose normalized increment
    sums converge to a spectrally positive stable law.

Rescaled sums of ensemble draws then converge to the mechanism's continuum
processes, which is what the convergence experiments check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError
from .laws import Law, extinction_floor

__all__ = [
    "Mechanism",
    "OffspringEnsemble",
    "ScalingFamily",
    "brownian_family",
    "stable_family",
    "extinction_floor_table",
    "branching_coefficient",
    "tail_amplitude",
]


@dataclass(frozen=True)
class Mechanism:
    beta: tuple
    alpha: tuple
    delta: tuple
    x0: tuple

    def __post_init__(self) -> None:
        beta = tuple(float(b) for b in self.beta)
        alpha = tuple(tuple(float(a) for a in row) for row in self.alpha)
        delta = tuple(float(d) for d in self.delta)
        x0 = tuple(float(x) for x in self.x0)
        n = len(beta)
        if n == 0:
            raise ConfigError("mechanism needs at least one type")
        if len(alpha) != n or any(len(row) != n for row in alpha):
            raise ConfigError(f"alpha must be {n}x{n}")
        if len(delta) != n or len(x0) != n:
            raise ConfigError("beta, delta, x0 must have equal length")
        if any(b < 0 for b in beta):
            raise ConfigError("beta entries must be >= 0")
        if any(d <= 0 for d in delta):
            raise ConfigError("delta entries must be > 0")
        if any(x < 0 for x in x0):
            raise ConfigError("x0 entries must be >= 0")
        for i in range(n):
            for j in range(n):
                if i != j and alpha[i][j] < 0:
                    raise ConfigError(f"alpha[{i}][{j}] must be >= 0 off the diagonal")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "x0", x0)

    @property
    def n_types(self) -> int:
        return len(self.beta)

    def is_diffusive(self) -> bool:
        """Every type carries a positive diffusion coefficient."""
        return all(b > 0 for b in self.beta)

    def to_dict(self) -> dict:
        return {
            "beta": list(self.beta),
            "alpha": [list(r) for r in self.alpha],
            "delta": list(self.delta),
            "x0": list(self.x0),
        }

    @staticmethod
    def from_dict(d: dict) -> "Mechanism":
        try:
            return Mechanism(d["beta"], d["alpha"], d["delta"], d["x0"])
        except KeyError as exc:
            raise ConfigError(f"mechanism config missing key {exc}") from exc


@dataclass(frozen=True)
class OffspringEnsemble:
    """Laws driving one forest: mu[i][j] children of type j per type-i parent
    (i, j in 1..N, stored 0-based), nu[j] type-j children per spine vertex,
    and roots[j] type-j roots at height 0. One color-0 root is implicit."""

    mu: tuple
    nu: tuple
    roots: tuple

    def __post_init__(self) -> None:
        mu = tuple(tuple(row) for row in self.mu)
        nu = tuple(self.nu)
        roots = tuple(int(k) for k in self.roots)
        n = len(nu)
        if n == 0:
            raise ConfigError("ensemble needs at least one type")
        if len(mu) != n or any(len(row) != n for row in mu):
            raise ConfigError(f"mu must be {n}x{n}")
        if len(roots) != n:
            raise ConfigError("roots must have one count per type")
        for row in mu:
            for law in row:
                if not isinstance(law, Law):
                    raise ConfigError("mu entries must be Law objects")
        for law in nu:
            if not isinstance(law, Law):
                raise ConfigError("nu entries must be Law objects")
        if any(k < 0 for k in roots):
            raise ConfigError("root counts must be >= 0")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "roots", roots)

    @property
    def n_types(self) -> int:
        return len(self.nu)

    def require_subcritical_diagonal(self) -> None:
        """Convergence runs need diagonal means <= 1 (finite components)."""
        for j in range(self.n_types):
            m = self.mu[j][j].mean()
            if m > 1.0 + 1e-9:
                raise ConfigError(
                    f"diagonal law for type {j + 1} has mean {m:.6g} > 1; "
                    "unsuitable for convergence runs"
                )

    def mean_offspring(self, parent_type: int, child_type: int) -> float:
        """parent_type 0 means the spine; types are 1-based."""
        if parent_type == 0:
            return self.nu[child_type - 1].mean()
        return self.mu[parent_type - 1][child_type - 1].mean()


# ---------------------------------------------------------------------------
# tail constant of the heavy-tailed diagonal law vs continuum coefficient
#
# For pmf(k) ~ A k^(-1-a) the normalized increment sums have Laplace
# exponent c u^a with c = A * G(2-a) / (a (a-1)); both directions below.


def branching_coefficient(tail_index: float, amplitude: float) -> float:
    a = tail_index
    if not 1.0 < a < 2.0:
        raise ConfigError(f"tail index must be in (1, 2), got {a}")
    return amplitude * math.gamma(2.0 - a) / (a * (a - 1.0))


def tail_amplitude(tail_index: float, coeff: float) -> float:
    a = tail_index
    if not 1.0 < a < 2.0:
        raise ConfigError(f"tail index must be in (1, 2), got {a}")
    if coeff <= 0:
        raise ConfigError("branching coefficient must be > 0")
    return coeff * a * (a - 1.0) / math.gamma(2.0 - a)


# ---------------------------------------------------------------------------
# families


def brownian_family(mechanism: Mechanism, p: int) -> OffspringEnsemble:
    """Ensemble at scale p under diffusion scaling (level scale gamma_p = p).

    Diagonal laws hit mean 1 + alpha_jj/p and variance 2 beta_j exactly;
    off-diagonals are poisson(alpha_ij/p); immigration is poisson(delta_j)
    so that the rescaled immigration sums have slope delta_j; root counts
    are round(x_j p).
    """
    if p < 1:
        raise ConfigError(f"scale p must be >= 1, got {p}")
    if not mechanism.is_diffusive():
        raise ConfigError("diffusion scaling needs beta_j > 0 for every type")
    n = mechanism.n_types
    for j in range(n):
        if mechanism.alpha[j][j] > 0:
            raise ConfigError(
                f"alpha[{j}][{j}] > 0: diagonal drift must be <= 0 "
                "(subcritical offspring)"
            )
    gamma_p = p
    mu = []
    for i in range(n):
        row = []
        for j in range(n):
            if i == j:
                row.append(Law.moment_mix(1.0 + mechanism.alpha[j][j] / p, 2.0 * mechanism.beta[j]))
            else:
                rate = mechanism.alpha[i][j] / gamma_p
                row.append(Law.poisson(rate) if rate > 0 else Law.dirac(0))
        mu.append(tuple(row))
    nu = tuple(Law.poisson(mechanism.delta[j] * p / gamma_p) for j in range(n))
    roots = tuple(int(round(mechanism.x0[j] * p)) for j in range(n))
    return OffspringEnsemble(tuple(mu), nu, roots)


def stable_family(
    coeffs,
    tail_index: float,
    p: int,
    delta=None,
    x0=None,
) -> OffspringEnsemble:
    """Ensemble at scale p under heavy-tail scaling, gamma_p = floor(p^(a-1)).

    coeffs are the per-type continuum branching coefficients c_j; the
    diagonal law is the critical power-tail law with matching amplitude.
    Cross interactions are zero (the heavy-tail checks are per type);
    delta defaults to 1 per type and x0 to 0.
    """
    if not 1.0 < tail_index < 2.0:
        raise ConfigError(f"tail index must be in (1, 2), got {tail_index}")
    if p < 1:
        raise ConfigError(f"scale p must be >= 1, got {p}")
    coeffs = tuple(float(c) for c in coeffs)
    n = len(coeffs)
    delta = tuple(1.0 for _ in range(n)) if delta is None else tuple(float(d) for d in delta)
    x0 = tuple(0.0 for _ in range(n)) if x0 is None else tuple(float(x) for x in x0)
    if len(delta) != n or len(x0) != n:
        raise ConfigError("delta and x0 must match the number of types")
    gamma_p = stable_scale(tail_index, p)
    mu = []
    for i in range(n):
        row = []
        for j in range(n):
            if i == j:
                row.append(Law.stable_tail(tail_index, tail_amplitude(tail_index, coeffs[j])))
            else:
                row.append(Law.dirac(0))
        mu.append(tuple(row))
    nu = tuple(Law.poisson(delta[j] * p / gamma_p) for j in range(n))
    roots = tuple(int(round(x0[j] * p)) for j in range(n))
    return OffspringEnsemble(tuple(mu), nu, roots)


def stable_scale(tail_index: float, p: int) -> int:
    return max(1, int(math.floor(p ** (tail_index - 1.0))))


@dataclass(frozen=True)
class ScalingFamily:
    """A mechanism together with its scale-indexed ensembles."""

    mechanism: Mechanism
    kind: str = "diffusion"
    tail_index: float = 0.0
    coeffs: tuple = field(default=())

    def __post_init__(self) -> None:
        if self.kind not in ("diffusion", "stable"):
            raise ConfigError(f"unknown family kind {self.kind!r}")
        if self.kind == "stable":
            if not 1.0 < self.tail_index < 2.0:
                raise ConfigError("stable family needs tail_index in (1, 2)")
            if len(self.coeffs) != self.mechanism.n_types:
                raise ConfigError("stable family needs one coefficient per type")
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))

    def gamma(self, p: int) -> int:
        if self.kind == "diffusion":
            return p
        return stable_scale(self.tail_index, p)

    def ensemble(self, p: int) -> OffspringEnsemble:
        if self.kind == "diffusion":
            return brownian_family(self.mechanism, p)
        return stable_family(
            self.coeffs,
            self.tail_index,
            p,
            delta=self.mechanism.delta,
            x0=self.mechanism.x0,
        )


def extinction_floor_table(family: ScalingFamily, delta: float, p_list):
    """Iterated-pgf floor diagnostic across scales, one row per (p, type).

    For each scale p and type j, iterates the diagonal generating function
    floor(delta * gamma_p) times at 0.  Returns (rows, flagged) where rows
    are (p, type, n_iterations, value) and flagged marks a family whose
    floor trends to zero (unsuitable for height-type limits).
    """
    rows = []
    flagged = False
    for j in range(family.mechanism.n_types):
        entries = [(p, family.gamma(p), family.ensemble(p).mu[j][j]) for p in p_list]
        sub_rows, degenerate = extinction_floor(entries, delta)
        rows.extend((p, j + 1, n, val) for (p, n, val) in sub_rows)
        flagged = flagged or degenerate
    return rows, flagged
