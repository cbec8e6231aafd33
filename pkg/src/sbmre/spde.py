"""Explicit finite-difference solvers for the limit SPDE, its dual and the log-Laplace PDE.

Forward:  du = 1/2 u'' dt + sqrt(gamma u + 2 beta^2 u^2) dW
Dual:     dY = (1/2 Y'' - gamma/2 Y^2) dt + sqrt(2) beta Y dW

Space-time white noise on a cell of size h x tau is sqrt(tau / h) * g with g
standard normal. The Euler-Maruyama forward step clips values at zero, which
manufactures mass wherever u is small against its noise. The alternative
"split" scheme takes the heat step and then samples the two noise parts
exactly per cell: the sqrt(gamma u) part is a Feller diffusion (Poisson-Gamma
transition) and the beta u part is geometric Brownian motion. Both exact steps
are nonnegative and mean preserving.

Replicas are stepped in fixed-size blocks, each block drawing from its own
Philox stream, so results do not depend on how blocks are spread across workers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .ensemble import map_replicas
from .measure import TestFunction
from .particles import SPDE_STREAM
from .rng import philox

BLOCK = 128
FORWARD, DUAL = 0, 1
POISSON_MAX = 1e12  # numpy's Poisson sampler rejects larger means


class Boundary(str, Enum):
    NEUMANN = "neumann"
    DIRICHLET0 = "dirichlet0"


class Scheme(str, Enum):
    EM = "em"
    SPLIT = "split"


class SpdeError(RuntimeError):
    """Non-finite state; carries time and replica context."""


@dataclass(frozen=True)
class SpdeGrid:
    """Cell-centred uniform grid on [x_min, x_max] with explicit step sizes."""

    x_min: float
    x_max: float
    h: float
    tau: float
    boundary: Boundary = Boundary.NEUMANN

    def __post_init__(self) -> None:
        object.__setattr__(self, "boundary", Boundary(self.boundary))
        if not self.x_max > self.x_min:
            raise ValueError("need x_max > x_min")
        if self.h <= 0 or self.tau <= 0:
            raise ValueError("h and tau must be positive")
        cells = (self.x_max - self.x_min) / self.h
        if abs(cells - round(cells)) > 1e-9 * max(1.0, cells):
            raise ValueError("h must divide x_max - x_min")
        if self.tau > 0.5 * self.h**2 * (1.0 + 1e-12):
            raise ValueError(f"unstable explicit scheme: tau={self.tau:g} > h^2/2={0.5 * self.h**2:g}")

    @property
    def cells(self) -> int:
        return int(round((self.x_max - self.x_min) / self.h))

    @property
    def x(self) -> NDArray[np.float64]:
        return self.x_min + (np.arange(self.cells) + 0.5) * self.h

    def sample(self, phi: TestFunction) -> NDArray[np.float64]:
        return np.asarray(phi(self.x), dtype=np.float64)

    def steps_to(self, t: float) -> tuple[int, float]:
        """Step count and (possibly shortened) step size landing exactly on t."""
        if t < 0:
            raise ValueError("time must be nonnegative")
        n = int(math.ceil(t / self.tau - 1e-9))
        return n, (t / n if n else self.tau)


@dataclass(frozen=True)
class SpdeParams:
    gamma: float
    beta: float
    t_end: float
    noise_seed: int = 0
    dual_noise: float | None = None  # override for the dual noise coefficient
    scheme: Scheme = Scheme.EM        # forward scheme

    def __post_init__(self) -> None:
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("gamma and beta must be nonnegative")
        if self.t_end < 0:
            raise ValueError("t_end must be nonnegative")

    @property
    def dual_coeff(self) -> float:
        return math.sqrt(2.0) * self.beta if self.dual_noise is None else self.dual_noise


@dataclass
class SpdeState:
    grid: SpdeGrid
    t: float
    values: NDArray[np.float64]  # (cells,) or (replicas, cells)


def laplacian(u: NDArray[np.float64], h: float, boundary: Boundary) -> NDArray[np.float64]:
    """Three-point second difference along the last axis with ghost cells."""
    pad = [(0, 0)] * (u.ndim - 1) + [(1, 1)]
    mode = "edge" if boundary is Boundary.NEUMANN else "constant"
    w = np.pad(u, pad, mode=mode)
    return (w[..., 2:] - 2.0 * u + w[..., :-2]) / (h * h)


def _check(u: NDArray[np.float64], t: float, what: str) -> None:
    if not np.all(np.isfinite(u)):
        bad = np.argwhere(~np.isfinite(u))[0]
        raise SpdeError(f"{what}: non-finite value at t={t:g}, index {tuple(int(i) for i in bad)}")


def _forward(u, grid, params, tau, g):
    var = np.maximum(params.gamma * u + 2.0 * params.beta**2 * u * u, 0.0)
    new = u + 0.5 * tau * laplacian(u, grid.h, grid.boundary)
    if g is not None:
        new += np.sqrt(var) * math.sqrt(tau / grid.h) * g
    return np.maximum(new, 0.0)


def _forward_split(u, grid, params, tau, rng):
    u = np.maximum(u + 0.5 * tau * laplacian(u, grid.h, grid.boundary), 0.0)
    if rng is None:
        return u
    if params.gamma > 0:
        # Feller step: u' = c Gamma(K), K ~ Poisson(u / c), c = gamma tau / (2h)
        c = params.gamma * tau / (2.0 * grid.h)
        lam = u / c
        big = lam > POISSON_MAX
        k = rng.poisson(np.where(big, 0.0, lam))
        new = np.zeros_like(u)
        hit = k > 0
        new[hit] = c * rng.gamma(k[hit])
        if big.any():
            # u >> c: the transition is Gaussian with mean u and variance 2 c u
            new[big] = np.maximum(u[big] + np.sqrt(2.0 * c * u[big]) * rng.standard_normal(int(big.sum())), 0.0)
        u = new
    if params.beta > 0:
        s2 = 2.0 * params.beta**2 * tau / grid.h
        u = u * np.exp(math.sqrt(s2) * rng.standard_normal(u.shape) - 0.5 * s2)
    return u


def _dual(y, grid, params, tau, g):
    new = y + 0.5 * tau * laplacian(y, grid.h, grid.boundary) - 0.5 * params.gamma * tau * y * y
    if g is not None:
        new += params.dual_coeff * y * math.sqrt(tau / grid.h) * g
    return np.maximum(new, 0.0)


def em_step_forward(state: SpdeState, params: SpdeParams, rng: np.random.Generator | None,
                    tau: float | None = None) -> SpdeState:
    """One step of the forward equation (noise skipped when rng is None).

    ``params.scheme`` selects clipped Euler-Maruyama or the exact-noise splitting.
    """
    tau = state.grid.tau if tau is None else tau
    if params.scheme is Scheme.SPLIT:
        u = _forward_split(state.values, state.grid, params, tau, rng)
    else:
        g = None if rng is None else rng.standard_normal(state.values.shape)
        u = _forward(state.values, state.grid, params, tau, g)
    _check(u, state.t + tau, "forward SPDE")
    return SpdeState(state.grid, state.t + tau, u)


def em_step_dual(state: SpdeState, params: SpdeParams, rng: np.random.Generator | None,
                 tau: float | None = None) -> SpdeState:
    """One Euler-Maruyama step of the dual equation (noise skipped when rng is None)."""
    tau = state.grid.tau if tau is None else tau
    noisy = rng is not None and params.dual_coeff != 0.0
    g = rng.standard_normal(state.values.shape) if noisy else None
    y = _dual(state.values, state.grid, params, tau, g)
    _check(y, state.t + tau, "dual SPDE")
    return SpdeState(state.grid, state.t + tau, y)


def deterministic_log_laplace(phi: TestFunction, params: SpdeParams, grid: SpdeGrid) -> SpdeState:
    """v(t_end) for v' = 1/2 v'' - gamma/2 v^2, v(0) = phi (beta is ignored)."""
    v0 = grid.sample(phi)
    if np.any(v0 < 0):
        raise ValueError("log-Laplace initial data must be nonnegative")
    n, tau = grid.steps_to(params.t_end)
    st = SpdeState(grid, 0.0, v0)
    for _ in range(n):
        st = em_step_dual(st, replace(params, beta=0.0, dual_noise=0.0), None, tau)
    return st


def grid_pair(state: SpdeState | NDArray[np.float64], phi: TestFunction | ArrayLike,
              grid: SpdeGrid | None = None) -> NDArray[np.float64] | float:
    """h * sum_i phi(x_i) values_i (per replica for 2-d values)."""
    if isinstance(state, SpdeState):
        grid, values = state.grid, state.values
    else:
        values = np.asarray(state, dtype=np.float64)
    if grid is None:
        raise ValueError("grid required for raw value arrays")
    f = grid.sample(phi) if isinstance(phi, TestFunction) else np.asarray(phi, dtype=np.float64)
    out = grid.h * np.sum(values * f, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def interpolate(state: SpdeState, points: ArrayLike) -> NDArray[np.float64]:
    """Linear interpolation of the state at points (zero outside the domain)."""
    x = state.grid.x
    pts = np.asarray(points, dtype=np.float64)
    vals = np.atleast_2d(state.values)
    out = np.stack([np.interp(pts, x, v, left=0.0, right=0.0) for v in vals])
    return out if state.values.ndim == 2 else out[0]


# -- replica ensembles -------------------------------------------------------

@dataclass(frozen=True)
class _Batch:
    kind: int
    grid: SpdeGrid
    params: SpdeParams
    init: NDArray[np.float64]
    replicas: int
    t: float


def _run_block(batch: _Batch, b: int) -> NDArray[np.float64]:
    r0 = b * BLOCK
    m = min(BLOCK, batch.replicas - r0)
    rng = philox(batch.params.noise_seed, SPDE_STREAM, batch.kind, b)
    n, tau = batch.grid.steps_to(batch.t)
    step = em_step_forward if batch.kind == FORWARD else em_step_dual
    st = SpdeState(batch.grid, 0.0, np.tile(batch.init, (m, 1)))
    for _ in range(n):
        try:
            st = step(st, batch.params, rng, tau)
        except SpdeError as exc:
            raise SpdeError(f"replicas {r0}..{r0 + m - 1}: {exc}") from exc
    return st.values


def solve_ensemble(kind: int, grid: SpdeGrid, params: SpdeParams, init: ArrayLike, replicas: int,
                   t: float | None = None, workers: int = 1) -> NDArray[np.float64]:
    """Final states (replicas, cells) of independent runs from ``init``."""
    init = np.asarray(init, dtype=np.float64)
    if init.shape != (grid.cells,):
        raise ValueError(f"initial data must have {grid.cells} cells")
    if np.any(init < 0):
        raise ValueError("initial data must be nonnegative")
    batch = _Batch(kind, grid, params, init, replicas, params.t_end if t is None else t)
    blocks = map_replicas(_run_block, batch, -(-replicas // BLOCK), workers)
    return np.concatenate(blocks, axis=0)


def solve_forward(grid: SpdeGrid, params: SpdeParams, u0: ArrayLike, replicas: int,
                  t: float | None = None, workers: int = 1) -> NDArray[np.float64]:
    return solve_ensemble(FORWARD, grid, params, u0, replicas, t, workers)


def solve_dual(grid: SpdeGrid, params: SpdeParams, y0: ArrayLike, replicas: int,
               t: float | None = None, workers: int = 1) -> NDArray[np.float64]:
    return solve_ensemble(DUAL, grid, params, y0, replicas, t, workers)


def snapshot_rows(grid: SpdeGrid, t: float, values: NDArray[np.float64]):
    """CSV rows (replica, t, x, u) for a stack of states."""
    x = grid.x.tolist()
    for r, row in enumerate(np.atleast_2d(values)):
        for xi, ui in zip(x, row.tolist()):
            yield r, t, xi, ui
