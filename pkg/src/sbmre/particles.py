"""Site-aggregated branching random walk in a space-time random environment.

Particles sharing a (time, site) pair are exchangeable, so one step draws a
Binomial number of left movers per site and, for the Example law, twice a
Binomial number of successful splits per direction. Offspring use the law of
the departure site and land on the arrival site.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator, Sequence

import numba as nb
import numpy as np
from numpy.typing import NDArray

from .env import EnvSpec, LawKind, law_for_sign
from .rng import binomial, derive_key, new_stream, next_double, xi_hash

MOVE_STREAM = 1
ENV_STREAM = 2
SPDE_STREAM = 3
MC_STREAM = 4

MAX_SITE_COUNT = 2**62
MAX_TAGS = 64


class SimulationError(RuntimeError):
    """A replica could not continue; carries replica/step context."""


class Mode(str, Enum):
    ANNEALED = "annealed"
    QUENCHED = "quenched"


@dataclass
class ParticleField:
    """Occupation numbers B_{n,x} on the contiguous site window [lo, lo + width).

    ``counts`` has one row per origin tag (a single row when untagged); the
    per-site occupation is the column sum.
    """

    step_n: int
    lo: int
    counts: NDArray[np.int64]
    tagged: bool = False

    @property
    def totals(self) -> NDArray[np.int64]:
        return self.counts.sum(axis=0)

    @property
    def sites(self) -> NDArray[np.int64]:
        return self.lo + np.arange(self.counts.shape[1], dtype=np.int64)

    @property
    def mass(self) -> int:
        return int(self.counts.sum())

    def occupied(self) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
        tot = self.totals
        nz = np.nonzero(tot)[0]
        return self.lo + nz.astype(np.int64), tot[nz]

    def as_dict(self) -> dict[int, int]:
        s, c = self.occupied()
        return {int(a): int(b) for a, b in zip(s, c)}

    def tag_masses(self) -> NDArray[np.int64]:
        return self.counts.sum(axis=1)

    def parity_ok(self) -> bool:
        s, _ = self.occupied()
        return bool(np.all((s + self.step_n) % 2 == 0))


@dataclass
class StepRecord:
    """Per-source-site aggregates of one transition (occupied sites only)."""

    step_n: int
    sites: NDArray[np.int64]
    xi: NDArray[np.int8]
    counts: NDArray[np.int64]
    parents_left: NDArray[np.int64]
    parents_right: NDArray[np.int64]
    children_left: NDArray[np.int64]
    children_right: NDArray[np.int64]
    example_law: bool = True


@dataclass
class RunConfig:
    env: EnvSpec
    initial: list[tuple[int, int]]
    horizon_steps: int
    replicas: int = 1
    mode: Mode = Mode.ANNEALED
    seed: int = 0
    tagged: bool = False
    record_snapshots: bool = True
    record_steps: bool = False

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        self.initial = [(int(s), int(c)) for s, c in self.initial]
        if self.horizon_steps < 0:
            raise ValueError("horizon must be nonnegative")
        if self.replicas < 1:
            raise ValueError("need at least one replica")
        if any(c < 0 for _, c in self.initial):
            raise ValueError("initial counts must be nonnegative")
        if any(s % 2 for s, c in self.initial if c):
            warnings.warn("initial sites are not all even; parity checks disabled", stacklevel=2)

    @property
    def parity_checked(self) -> bool:
        return not any(s % 2 for s, c in self.initial if c)

    def replica_env(self, r: int) -> EnvSpec:
        if self.mode is Mode.QUENCHED:
            return self.env
        return self.env.with_seed(derive_key(self.env.seed, ENV_STREAM, r))

    def replica_rng(self, r: int) -> NDArray[np.uint64]:
        return new_stream(self.seed, MOVE_STREAM, r)


def init_field(initial: Sequence[tuple[int, int]], tagged: bool = False) -> ParticleField:
    """Build the step-0 field; with ``tagged`` every initial particle gets its own tag."""
    initial = [(int(s), int(c)) for s, c in initial if c]
    if any(c < 0 for _, c in initial):
        raise ValueError("initial counts must be nonnegative")
    if not initial:
        return ParticleField(0, 0, np.zeros((1, 0), dtype=np.int64), tagged)
    lo = min(s for s, _ in initial)
    hi = max(s for s, _ in initial)
    if tagged:
        ntags = sum(c for _, c in initial)
        if ntags > MAX_TAGS:
            raise ValueError(f"origin tagging supports at most {MAX_TAGS} initial particles")
        counts = np.zeros((ntags, hi - lo + 1), dtype=np.int64)
        row = 0
        for s, c in initial:
            for _ in range(c):
                counts[row, s - lo] = 1
                row += 1
    else:
        counts = np.zeros((1, hi - lo + 1), dtype=np.int64)
        for s, c in initial:
            counts[0, s - lo] += c
    return ParticleField(0, lo, counts, tagged)


def _trim(lo: int, counts: NDArray[np.int64]) -> tuple[int, NDArray[np.int64]]:
    nz = np.nonzero(counts.any(axis=0))[0]
    if nz.size == 0:
        return 0, counts[:, :0]
    return lo + int(nz[0]), counts[:, nz[0]: nz[-1] + 1]


@nb.njit(cache=True)
def _custom_total(m, ks, cdf, state):
    # per-parent categorical draws
    tot = 0
    for _ in range(m):
        u = next_double(state)
        j = 0
        while j < cdf.shape[0] - 1 and u >= cdf[j]:
            j += 1
        tot += ks[j]
    return tot


@nb.njit(cache=True)
def _step_kernel(counts, lo, n, env_seed, half_tilt, example, ks_minus, cdf_minus, ks_plus, cdf_plus,
                 state, limit):
    T, L = counts.shape
    xi = np.empty(L, dtype=np.int8)
    pl = np.zeros((T, L), dtype=np.int64)
    cl = np.zeros((T, L), dtype=np.int64)
    cr = np.zeros((T, L), dtype=np.int64)
    new = np.zeros((T, L + 2), dtype=np.int64)
    overflow = False
    for j in range(L):
        s = xi_hash(env_seed, n, lo + j)
        xi[j] = s
        p2 = 0.5 + half_tilt * s
        for t in range(T):
            c = counts[t, j]
            if c == 0:
                continue
            a = binomial(c, 0.5, state)
            b = c - a
            if example:
                ca = 2 * binomial(a, p2, state)
                cb = 2 * binomial(b, p2, state)
            elif s > 0:
                ca = _custom_total(a, ks_plus, cdf_plus, state)
                cb = _custom_total(b, ks_plus, cdf_plus, state)
            else:
                ca = _custom_total(a, ks_minus, cdf_minus, state)
                cb = _custom_total(b, ks_minus, cdf_minus, state)
            pl[t, j] = a
            cl[t, j] = ca
            cr[t, j] = cb
            new[t, j] += ca
            new[t, j + 2] += cb
            if new[t, j] > limit or new[t, j + 2] > limit:
                overflow = True
    return new, xi, pl, cl, cr, overflow


_EMPTY_I = np.zeros(1, dtype=np.int64)
_EMPTY_F = np.ones(1)


def _law_tables(env: EnvSpec):
    if env.law_kind is LawKind.EXAMPLE:
        return _EMPTY_I, _EMPTY_F, _EMPTY_I, _EMPTY_F
    out = []
    for sign in (-1, 1):
        law = law_for_sign(env, sign)
        cdf = np.cumsum(law.probs)
        cdf[-1] = 1.0
        out += [law.ks, cdf]
    return tuple(out)


def step(field: ParticleField, env: EnvSpec, rng: NDArray[np.uint64]) -> tuple[ParticleField, StepRecord]:
    """Advance one lattice time; returns the new field and its sufficient statistics.

    ``rng`` is a counter-based stream from :func:`sbmre.rng.new_stream` and is
    advanced in place.
    """
    n = field.step_n
    c = field.counts
    example = env.law_kind is LawKind.EXAMPLE
    if c.shape[1] == 0:
        empty = np.zeros(0, dtype=np.int64)
        rec = StepRecord(n, empty, np.zeros(0, dtype=np.int8), empty, empty, empty, empty, empty, example)
        return ParticleField(n + 1, 0, c.copy(), field.tagged), rec

    half_tilt = env.beta / (2.0 * env.quarter_root) if example else 0.0
    new, xi, pl, cl, cr, overflow = _step_kernel(
        c, field.lo, n, np.uint64(env.seed), half_tilt, example, *_law_tables(env), rng, MAX_SITE_COUNT)
    if overflow:
        raise SimulationError(f"site count overflow at step {n + 1}")
    lo, new = _trim(field.lo - 1, new)

    tot = c.sum(axis=0)
    occ = tot > 0
    plt = pl.sum(axis=0)[occ]
    rec = StepRecord(
        step_n=n,
        sites=field.sites[occ],
        xi=xi[occ],
        counts=tot[occ],
        parents_left=plt,
        parents_right=tot[occ] - plt,
        children_left=cl.sum(axis=0)[occ],
        children_right=cr.sum(axis=0)[occ],
        example_law=example,
    )
    return ParticleField(n + 1, lo, new, field.tagged), rec


def iter_replica(cfg: RunConfig, r: int) -> Iterator[tuple[ParticleField, StepRecord | None]]:
    """Yield (field, record-that-produced-it) for steps 0..horizon of replica r."""
    env = cfg.replica_env(r)
    rng = cfg.replica_rng(r)
    f = init_field(cfg.initial, cfg.tagged)
    yield f, None
    for _ in range(cfg.horizon_steps):
        try:
            f, rec = step(f, env, rng)
        except SimulationError as exc:
            raise SimulationError(f"replica {r}: {exc}") from exc
        yield f, rec


@dataclass
class Trajectory:
    replica: int
    snapshots: list[ParticleField] = field(default_factory=list)
    records: list[StepRecord] = field(default_factory=list)


def simulate_replica(cfg: RunConfig, r: int) -> Trajectory:
    traj = Trajectory(r)
    for f, rec in iter_replica(cfg, r):
        if cfg.record_snapshots:
            traj.snapshots.append(f)
        if rec is not None and cfg.record_steps:
            traj.records.append(rec)
    if not cfg.record_snapshots:
        traj.snapshots.append(f)
    return traj


def run(cfg: RunConfig, workers: int = 1) -> list[Trajectory]:
    """Simulate every replica; the result is independent of ``workers``."""
    from .ensemble import map_replicas

    return map_replicas(_simulate_one, cfg, cfg.replicas, workers)


def _simulate_one(cfg: RunConfig, r: int) -> Trajectory:
    return simulate_replica(cfg, r)


def replica_observable(cfg: RunConfig, r: int,
                       observe: Callable[[ParticleField, StepRecord | None], float]) -> NDArray[np.float64]:
    """Evaluate ``observe`` at every step of replica r."""
    return np.array([observe(f, rec) for f, rec in iter_replica(cfg, r)], dtype=np.float64)


# -- CSV dumps ---------------------------------------------------------------

def snapshot_rows(traj: Trajectory) -> Iterator[tuple[int, int, int, int]]:
    for f in traj.snapshots:
        s, c = f.occupied()
        for site, count in zip(s.tolist(), c.tolist()):
            yield traj.replica, f.step_n, site, count


def record_rows(traj: Trajectory) -> Iterator[tuple[int, ...]]:
    for rec in traj.records:
        for row in zip(rec.sites.tolist(), rec.xi.tolist(), rec.parents_left.tolist(),
                       rec.parents_right.tolist(), rec.children_left.tolist(),
                       rec.children_right.tolist()):
            yield (traj.replica, rec.step_n, *row)
