"""Space-time random environment for the branching random walk.

The sign field xi(n, x) is never stored. Every value is recomputed from a
SplitMix64-style hash of (seed, n, x), so runs of any length use O(1) memory
and two processes holding the same seed see the same environment.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

_GOLDEN_U = np.uint64(GOLDEN)
_MIX1_U = np.uint64(MIX1)
_MIX2_U = np.uint64(MIX2)


class LawKind(str, Enum):
    EXAMPLE = "example"
    CUSTOM = "custom"


@dataclass(frozen=True)
class OffspringLaw:
    """Finite offspring distribution as ``((k, p), ...)`` pairs."""

    pmf: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        pmf = tuple((int(k), float(p)) for k, p in self.pmf)
        object.__setattr__(self, "pmf", pmf)
        if not pmf:
            raise ValueError("offspring law needs at least one atom")
        if any(k < 0 for k, _ in pmf):
            raise ValueError("offspring counts must be nonnegative")
        if any(p < 0.0 for _, p in pmf):
            raise ValueError(f"negative probability in {pmf}")
        total = math.fsum(p for _, p in pmf)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {total!r}, not 1")

    @property
    def ks(self) -> NDArray[np.int64]:
        return np.array([k for k, _ in self.pmf], dtype=np.int64)

    @property
    def probs(self) -> NDArray[np.float64]:
        return np.array([p for _, p in self.pmf], dtype=np.float64)

    def prob(self, k: int) -> float:
        return math.fsum(p for kk, p in self.pmf if kk == k)


def law_moment(law: OffspringLaw, p: int) -> float:
    """Return the p-th raw moment sum_k k**p q(k)."""
    if p < 1:
        raise ValueError("moment order must be a positive integer")
    return math.fsum((k**p) * q for k, q in law.pmf)


@dataclass(frozen=True)
class EnvSpec:
    """Immutable description of the offspring-law field q^{(N)}_{n,x}.

    ``custom_laws`` maps each sign of xi to an offspring law and is only
    consulted when ``law_kind`` is ``LawKind.CUSTOM``.
    """

    scale_N: int
    beta: float
    seed: int
    law_kind: LawKind = LawKind.EXAMPLE
    gamma_target: float = 1.0
    custom_laws: Mapping[int, OffspringLaw] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "law_kind", LawKind(self.law_kind))
        if int(self.scale_N) != self.scale_N or self.scale_N < 1:
            raise ValueError(f"scale N must be a positive integer, got {self.scale_N!r}")
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta!r}")
        if not 0 <= int(self.seed) <= MASK64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        object.__setattr__(self, "seed", int(self.seed))
        if self.law_kind is LawKind.EXAMPLE:
            if self.beta > self.quarter_root + 1e-15:
                raise ValueError(
                    f"beta={self.beta} exceeds N^(1/4)={self.quarter_root:.6g}; "
                    "offspring probabilities would leave [0, 1]"
                )
        else:
            if self.custom_laws is None or set(self.custom_laws) != {-1, 1}:
                raise ValueError("custom law table needs one OffspringLaw for each xi in {-1, +1}")

    @property
    def quarter_root(self) -> float:
        return float(self.scale_N) ** 0.25

    @property
    def tilt(self) -> float:
        """beta / N^{1/4}: the size of the mean-offspring fluctuation."""
        return self.beta / self.quarter_root

    def with_seed(self, seed: int) -> EnvSpec:
        return EnvSpec(self.scale_N, self.beta, seed, self.law_kind,
                       self.gamma_target, self.custom_laws)


# -- hashing -----------------------------------------------------------------

def splitmix64_finalize(z: int) -> int:
    """SplitMix64 output finalizer on a Python int (reference path)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def zigzag(x: int) -> int:
    return (2 * x) if x >= 0 else (-2 * x - 1)


def pack_counter(seed: int, n: int, x: int) -> int:
    return (seed ^ ((n * GOLDEN) & MASK64) ^ ((zigzag(x) * MIX1) & MASK64)) & MASK64


def _finalize_u64(z: NDArray[np.uint64]) -> NDArray[np.uint64]:
    z = (z ^ (z >> np.uint64(30))) * _MIX1_U
    z = (z ^ (z >> np.uint64(27))) * _MIX2_U
    return z ^ (z >> np.uint64(31))


def xi_array(seed: int, n: int, sites: ArrayLike) -> NDArray[np.int8]:
    """Vectorized xi(n, x) for an array of sites at one lattice time."""
    x = np.asarray(sites, dtype=np.int64)
    zz = ((x << 1) ^ (x >> 63)).view(np.uint64)
    with np.errstate(over="ignore"):
        nterm = np.uint64(n) * _GOLDEN_U
        z = np.uint64(seed) ^ nterm ^ (zz * _MIX1_U)
        h = _finalize_u64(z)
    bit = (h & np.uint64(1)).astype(np.int8)
    return (2 * bit - 1).astype(np.int8)


def sample_xi(env: EnvSpec, n: int, x: int) -> int:
    """Return xi(n, x) in {-1, +1}; a pure function of (env.seed, n, x)."""
    if n < 0:
        raise ValueError("lattice time must be nonnegative")
    h = splitmix64_finalize(pack_counter(env.seed, n, x))
    return 1 if h & 1 else -1


# -- offspring laws ----------------------------------------------------------

def example_law(beta: float, N: int, xi: int) -> OffspringLaw:
    d = beta * xi / (2.0 * N**0.25)
    return OffspringLaw(((0, 0.5 - d), (2, 0.5 + d)))


def law_for_sign(env: EnvSpec, xi: int) -> OffspringLaw:
    if env.law_kind is LawKind.EXAMPLE:
        return example_law(env.beta, env.scale_N, xi)
    assert env.custom_laws is not None
    return env.custom_laws[xi]


def offspring_pmf(env: EnvSpec, n: int, x: int) -> OffspringLaw:
    return law_for_sign(env, sample_xi(env, n, x))


def split_probability(env: EnvSpec, xi: NDArray[np.int8]) -> NDArray[np.float64]:
    """q(2) per site for the Example law."""
    return 0.5 + env.beta * xi.astype(np.float64) / (2.0 * env.quarter_root)


# -- environment moment audit ---------------------------------------------------

@dataclass(frozen=True)
class AuditRow:
    beta: float
    N: int
    mean_m1: float
    gamma_row: float  # E[m2 - 1]
    m4: float
    beta2_row: float  # sqrt(N) E[(m1 - 1)^2]
    fourth_row: float  # sqrt(N) E[(m1 - 1)^4]
    violations: tuple[str, ...] = ()


@dataclass(frozen=True)
class AuditReport:
    rows: tuple[AuditRow, ...]

    @property
    def ok(self) -> bool:
        return all(not r.violations for r in self.rows)

    def table(self) -> str:
        head = f"{'beta':>6} {'N':>6} {'E[m1]':>10} {'E[m2-1]':>10} {'E[m4]':>10} {'beta2':>10} {'4th':>10}"
        lines = [head]
        for r in self.rows:
            lines.append(
                f"{r.beta:>6.3g} {r.N:>6d} {r.mean_m1:>10.6f} {r.gamma_row:>10.6f} "
                f"{r.m4:>10.6f} {r.beta2_row:>10.6f} {r.fourth_row:>10.6f}"
                + ("  " + "; ".join(r.violations) if r.violations else "")
            )
        return "\n".join(lines)


def audit_assumption_a(
    betas: Sequence[float],
    Ns: Sequence[int],
    custom_laws: Mapping[int, OffspringLaw] | None = None,
    tol: float = 1e-12,
) -> AuditReport:
    """Exact environment averages of the offspring moments.

    xi is a fair sign, so every expectation over the environment is the
    average of the two conditional laws; no sampling is needed for either
    the Example law or a custom per-sign table.
    """
    rows = []
    for beta in betas:
        for N in Ns:
            if custom_laws is None:
                laws = [example_law(beta, N, s) for s in (-1, 1)]
                if beta > N**0.25:
                    raise ValueError(f"beta={beta} inadmissible for N={N}")
            else:
                laws = [custom_laws[-1], custom_laws[1]]
            m1 = [law_moment(q, 1) for q in laws]
            m2 = [law_moment(q, 2) for q in laws]
            m4 = [law_moment(q, 4) for q in laws]
            mean_m1 = 0.5 * (m1[0] + m1[1])
            gamma_row = 0.5 * (m2[0] + m2[1]) - 1.0
            root = math.sqrt(N)
            beta2_row = root * 0.5 * ((m1[0] - 1.0) ** 2 + (m1[1] - 1.0) ** 2)
            fourth_row = root * 0.5 * ((m1[0] - 1.0) ** 4 + (m1[1] - 1.0) ** 4)
            bad = []
            if abs(mean_m1 - 1.0) > tol:
                bad.append(f"E[m1]={mean_m1!r} != 1")
            if custom_laws is None:
                if abs(gamma_row - 1.0) > tol:
                    bad.append(f"E[m2-1]={gamma_row!r} != 1")
                if abs(beta2_row - beta**2) > tol * max(1.0, beta**2):
                    bad.append(f"sqrt(N)E[(m1-1)^2]={beta2_row!r} != beta^2")
            rows.append(AuditRow(beta, N, mean_m1, gamma_row, 0.5 * (m4[0] + m4[1]),
                                 beta2_row, fourth_row, tuple(bad)))
    return AuditReport(tuple(rows))
