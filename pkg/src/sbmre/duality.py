"""Both sides of the Laplace-functional duality E exp(-<X_t, phi>) = E exp(-<X_0, Y_t>)."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .ensemble import Estimate, estimate
from .measure import RAPID, TestFunction
from .particles import RunConfig
from .spde import SpdeGrid, SpdeParams, SpdeState, deterministic_log_laplace, grid_pair, solve_dual, solve_forward
from .trace import trace_ensemble

DEFAULT_BUDGET = 0.02


@dataclass(frozen=True)
class Atoms:
    """Finite measure sum_i w_i delta_{x_i}."""

    points: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.points) != len(self.weights):
            raise ValueError("points and weights differ in length")
        if any(w < 0 for w in self.weights):
            raise ValueError("atom weights must be nonnegative")

    @classmethod
    def dirac(cls, x: float = 0.0, mass: float = 1.0) -> Atoms:
        return cls((float(x),), (float(mass),))


@dataclass(frozen=True)
class GridMeasure:
    """Measure with density ``values`` on the cells of ``grid``."""

    grid: SpdeGrid
    values: NDArray[np.float64]


InitialMeasure = Union[Atoms, GridMeasure]


@dataclass(frozen=True)
class ParticleSource:
    """Forward side from the particle system; X_t is read at step round(t N)."""

    cfg: RunConfig


@dataclass(frozen=True)
class SpdeSource:
    grid: SpdeGrid
    params: SpdeParams
    u0: NDArray[np.float64]


def _require_phi(phi: TestFunction) -> None:
    if RAPID not in phi.class_tags:
        raise ValueError(f"{phi.name}: duality needs a rapidly decreasing test function")


def forward_laplace_samples(source: ParticleSource | SpdeSource, phi: TestFunction, t: float | None = None,
                            replicas: int | None = None, workers: int = 1) -> NDArray[np.float64]:
    """Per-replica exp(-<X_t, phi>)."""
    _require_phi(phi)
    if isinstance(source, ParticleSource):
        cfg = source.cfg
        steps = cfg.horizon_steps if t is None else int(round(t * cfg.env.scale_N))
        cfg = RunConfig(cfg.env, cfg.initial, steps, replicas or cfg.replicas, cfg.mode, cfg.seed,
                        record_snapshots=False)
        x = trace_ensemble(cfg, [phi], workers=workers).x_phi[:, 0, -1]
        return np.exp(-x)
    u = solve_forward(source.grid, source.params, source.u0, replicas or 1, t, workers)
    return np.exp(-np.atleast_1d(grid_pair(u, phi, source.grid)))


def estimate_forward_laplace(source: ParticleSource | SpdeSource, phi: TestFunction, t: float | None = None,
                             replicas: int | None = None, workers: int = 1) -> Estimate:
    """Mean and se of exp(-<X_t, phi>) over replicas."""
    return estimate(forward_laplace_samples(source, phi, t, replicas, workers))


def pair_initial(x0: InitialMeasure, grid: SpdeGrid, y: NDArray[np.float64]) -> NDArray[np.float64]:
    """<X_0, Y> per replica row of ``y``; atoms use linear interpolation of Y."""
    y = np.atleast_2d(y)
    if isinstance(x0, GridMeasure):
        if x0.grid != grid:
            raise ValueError("initial density must live on the dual grid")
        return np.atleast_1d(grid_pair(y, x0.values, grid))
    pts = np.asarray(x0.points, dtype=np.float64)
    w = np.asarray(x0.weights, dtype=np.float64)
    vals = np.stack([np.interp(pts, grid.x, row, left=0.0, right=0.0) for row in y])
    return vals @ w


def dual_laplace_samples(x0: InitialMeasure, phi: TestFunction, grid: SpdeGrid, params: SpdeParams,
                         t: float | None = None, replicas: int = 1, workers: int = 1) -> NDArray[np.float64]:
    """Per-replica exp(-<X_0, Y_t>) with Y_0 = phi."""
    _require_phi(phi)
    y0 = grid.sample(phi)
    if np.any(y0 < 0):
        raise ValueError("phi must be nonnegative")
    if params.dual_coeff == 0.0:
        # deterministic dual: one solve shared by every replica
        y = solve_dual(grid, params, y0, 1, t)
        return np.full(replicas, math.exp(-float(pair_initial(x0, grid, y)[0])))
    y = solve_dual(grid, params, y0, replicas, t, workers)
    return np.exp(-pair_initial(x0, grid, y))


def estimate_dual_laplace(x0: InitialMeasure, phi: TestFunction, grid: SpdeGrid, params: SpdeParams,
                          t: float | None = None, replicas: int = 1, workers: int = 1) -> Estimate:
    """Mean and se of exp(-<X_0, Y_t>); zero variance when the dual has no noise."""
    return estimate(dual_laplace_samples(x0, phi, grid, params, t, replicas, workers))


def log_laplace_value(x0: InitialMeasure, phi: TestFunction, grid: SpdeGrid, gamma: float, t: float) -> float:
    """exp(-<X_0, v_t>) from the deterministic log-Laplace equation."""
    v: SpdeState = deterministic_log_laplace(phi, SpdeParams(gamma, 0.0, t), grid)
    return math.exp(-float(pair_initial(x0, grid, v.values)[0]))


@dataclass(frozen=True)
class DualityReport:
    phi_id: str
    lhs_mean: float
    lhs_se: float
    rhs_mean: float
    rhs_se: float
    z: float
    discretization_budget: float
    verdict: str
    lhs_replicas: int
    rhs_replicas: int
    runtime: float

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def verdict(phi_id: str, lhs: Estimate, rhs: Estimate, budget: float = DEFAULT_BUDGET,
            runtime: float = 0.0) -> DualityReport:
    """Pass iff |lhs - rhs| <= 3 sqrt(se_l^2 + se_r^2) + budget."""
    se = math.hypot(lhs.se, rhs.se)
    diff = lhs.mean - rhs.mean
    z = diff / se if se > 0 else (0.0 if diff == 0 else math.copysign(math.inf, diff))
    ok = abs(diff) <= 3.0 * se + budget
    return DualityReport(phi_id, lhs.mean, lhs.se, rhs.mean, rhs.se, z, budget, "pass" if ok else "fail",
                         lhs.n, rhs.n, runtime)


def duality_check(forward: ParticleSource | SpdeSource, x0: InitialMeasure, phi: TestFunction,
                  grid: SpdeGrid, params: SpdeParams, t: float, replicas: int,
                  budget: float = DEFAULT_BUDGET, workers: int = 1) -> DualityReport:
    """Estimate both sides and return the verdict."""
    start = time.perf_counter()
    lhs = estimate_forward_laplace(forward, phi, t, replicas, workers)
    rhs = estimate_dual_laplace(x0, phi, grid, params, t, replicas, workers)
    return verdict(phi.name, lhs, rhs, budget, time.perf_counter() - start)


def initial_from(values: ArrayLike, grid: SpdeGrid) -> GridMeasure:
    return GridMeasure(grid, np.asarray(values, dtype=np.float64))
