"""Exact and Monte Carlo reference computations on simple random walks.

The collision functionals E[prod_i (1 + lam 1{Y1_i = Y2_i})] are computed by
transfer-matrix dynamic programs. The pair version runs on the difference
walk D = Y1 - Y2, which moves by 0 w.p. 1/2 and by +-2 w.p. 1/4 each.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.stats import binom

from .ensemble import Estimate, estimate
from .env import EnvSpec
from .measure import TestFunction
from .particles import MC_STREAM, Mode, RunConfig
from .rng import philox
from .trace import trace_ensemble

LOG_SPACE_ABOVE = 1000


def srw_pmf(n: int, x: int) -> float:
    """P(Y_n = x) for the simple random walk started at 0."""
    if n < 0:
        raise ValueError("walk length must be nonnegative")
    if abs(x) > n or (n + x) % 2:
        return 0.0
    k = (n + x) // 2
    if n <= LOG_SPACE_ABOVE:
        return math.comb(n, k) / 2**n
    # lgamma differences lose ~n ulps; scipy's binomial pmf works in log space without that cancellation
    return float(binom.pmf(k, n, 0.5))


def srw_law(n: int) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
    """Support and probabilities of Y_n (sites -n, -n+2, ..., n)."""
    k = np.arange(n + 1)
    return (2 * k - n).astype(np.int64), binom.pmf(k, n, 0.5)


def mean_measure_exact(N: int, n: int, phi: TestFunction) -> float:
    """E_Y[phi(Y_n / sqrt N)], the mean of X^{(N)}_{n/N}(phi) from unit mass at 0."""
    sites, p = srw_law(n)
    return float(np.sum(p * phi(sites / math.sqrt(N))))


# -- pair collision functionals ----------------------------------------------

def collision_functional_pair(n: int, lam: float, first_time: int = 1) -> float:
    """E[(1 + lam)^{#{first_time <= i <= n : Y1_i = Y2_i}}] for independent walks from 0.

    ``first_time=1`` is the usual convention. ``first_time=0`` also counts the
    shared starting point.
    """
    if n < 0:
        raise ValueError("walk length must be nonnegative")
    if lam < -1:
        raise ValueError("weight 1 + lam must be nonnegative")
    # state[j] holds weighted mass at D = 2 * (j - n)
    state = np.zeros(2 * n + 1)
    state[n] = 1.0
    w = 1.0 + lam
    if first_time <= 0:
        state[n] *= w
    for i in range(1, n + 1):
        nxt = 0.5 * state
        nxt[1:] += 0.25 * state[:-1]
        nxt[:-1] += 0.25 * state[1:]
        state = nxt
        if i >= first_time:
            state[n] *= w
    return float(np.sum(state))


def pair_moment_exact(n: int, lam: float) -> float:
    """E[B^1_n B^2_n] for two distinct ancestors at the origin.

    Both lineages draw their offspring law at the departure site of each of
    the steps 0..n-1, so collisions are counted at those times.
    """
    if n == 0:
        return 1.0
    return collision_functional_pair(n - 1, lam, first_time=0)


def collision_endpoint_table(n: int, lam: float, first_time: int = 1) -> NDArray[np.float64]:
    """Joint DP over (Y1, Y2); entry [x + n, y + n] is the weighted mass ending at (x, y)."""
    size = 2 * n + 1
    state = np.zeros((size, size))
    state[n, n] = 1.0
    w = 1.0 + lam
    if first_time <= 0:
        state[n, n] *= w
    diag = np.arange(size)
    for i in range(1, n + 1):
        nxt = np.zeros_like(state)
        nxt[1:, 1:] += state[:-1, :-1]
        nxt[1:, :-1] += state[:-1, 1:]
        nxt[:-1, 1:] += state[1:, :-1]
        nxt[:-1, :-1] += state[1:, 1:]
        state = 0.25 * nxt
        if i >= first_time:
            state[diag, diag] *= w
    return state


def collision_functional_pair_endpoint(n: int, lam: float, x: int, y: int) -> float:
    if abs(x) > n or abs(y) > n or (x + n) % 2 or (y + n) % 2:
        return 0.0
    return float(collision_endpoint_table(n, lam)[x + n, y + n])


# -- p-walk functionals --------------------------------------------------------

def _collision_indicator(pos: NDArray[np.int64]) -> NDArray[np.bool_]:
    """True where any two of the p walks (axis -1) share a site."""
    s = np.sort(pos, axis=-1)
    return np.any(s[..., 1:] == s[..., :-1], axis=-1)


def multiwalk_collision_exact(p: int, n: int, w: float) -> float:
    """E[w^{#{1<=i<=n : some pair coincides}}] by DP over the joint position vector."""
    if p < 2:
        raise ValueError("need at least two walks")
    state: dict[tuple[int, ...], float] = {(0,) * p: 1.0}
    moves = [tuple(m) for m in np.array(np.meshgrid(*[[-1, 1]] * p, indexing="ij")).reshape(p, -1).T]
    q = 0.5**p
    for _ in range(n):
        nxt: dict[tuple[int, ...], float] = {}
        for pos, mass in state.items():
            for m in moves:
                new = tuple(a + b for a, b in zip(pos, m))
                nxt[new] = nxt.get(new, 0.0) + q * mass
        for pos in nxt:
            if len(set(pos)) < p:
                nxt[pos] *= w
        state = nxt
    return math.fsum(state.values())


def multiwalk_collision_mc(p: int, n: int, w: float, replicas: int,
                           rng: np.random.Generator, batch: int = 50_000) -> Estimate:
    """Monte Carlo estimate of E[w^{#{1<=i<=n : some pair of the p walks coincides}}]."""
    if not 2 <= p <= 6:
        raise ValueError("p must be between 2 and 6")
    vals = []
    left = replicas
    while left > 0:
        m = min(batch, left)
        steps = 2 * rng.integers(0, 2, size=(m, n, p), dtype=np.int8) - 1
        pos = np.cumsum(steps, axis=1, dtype=np.int64)
        hits = _collision_indicator(pos).sum(axis=1)
        vals.append(np.power(float(w), hits))
        left -= m
    return estimate(np.concatenate(vals))


# -- pair moment against the simulator ----------------------------------------

@dataclass(frozen=True)
class OracleReport:
    query: str
    exact: float
    mc_mean: float
    mc_se: float
    z: float

    @property
    def passed(self) -> bool:
        return abs(self.z) <= 3.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def pair_moment_config(beta: float, N: int, n: int, replicas: int, seed: int) -> RunConfig:
    env = EnvSpec(N, beta, seed)
    return RunConfig(env, [(0, 2)], n, replicas, Mode.ANNEALED, seed=seed, tagged=True,
                     record_snapshots=False)


def pair_products(cfg: RunConfig, workers: int = 1) -> NDArray[np.float64]:
    """B^1_n * B^2_n per replica, from the origin tags."""
    m = trace_ensemble(cfg, workers=workers).tag_masses
    return m[:, 0] * m[:, 1]


def pair_moment_mc_check(beta: float, N: int, n: int, replicas: int, seed: int = 0,
                         workers: int = 1) -> OracleReport:
    """Compare the simulated E[B^1_n B^2_n] with the exact collision DP."""
    cfg = pair_moment_config(beta, N, n, replicas, seed)
    est = estimate(pair_products(cfg, workers))
    exact = pair_moment_exact(n, beta**2 / math.sqrt(N))
    return OracleReport(f"pair_moment(beta={beta:g},N={N},n={n})", exact, est.mean, est.se,
                        est.z(exact))


def mass_moment_mc(beta: float, N: int, K: float, power: int, replicas: int, seed: int = 0,
                   workers: int = 1) -> Estimate:
    """MC estimate of E[(B_n / B_0)^power] at n = floor(K N) from N particles at 0."""
    if power != 4:
        raise ValueError("only the fourth moment is wired up")
    cfg = RunConfig(EnvSpec(N, beta, seed), [(0, N)], int(math.floor(K * N)), replicas,
                    Mode.ANNEALED, seed=seed, record_snapshots=False)
    mass = trace_ensemble(cfg, workers=workers).mass[:, -1]
    return estimate((mass / N) ** power)


def mc_rng(seed: int) -> np.random.Generator:
    return philox(seed, MC_STREAM)


def collision_boundedness(K: float, beta: float, Ns: list[int]) -> list[float]:
    """collision_functional_pair(floor(K N), beta^2 / sqrt N) for each N."""
    return [collision_functional_pair(int(math.floor(K * N)), beta**2 / math.sqrt(N)) for N in Ns]
