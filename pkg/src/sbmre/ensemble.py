"""Replica fan-out and ensemble statistics.

Every replica owns its random streams, so splitting replicas across worker
processes changes wall time only. Results always come back in replica order.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Sequence, TypeVar

import numpy as np
from numpy.typing import ArrayLike, NDArray

T = TypeVar("T")


def default_workers() -> int:
    raw = os.environ.get("SBMRE_WORKERS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SBMRE_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"SBMRE_WORKERS must be >= 1, got {n}")
    return n


def _run_chunk(fn: Callable[[Any, int], T], ctx: Any, indices: Sequence[int]) -> list[T]:
    return [fn(ctx, r) for r in indices]


def map_replicas(fn: Callable[[Any, int], T], ctx: Any, n: int, workers: int = 1) -> list[T]:
    """``[fn(ctx, r) for r in range(n)]``, optionally spread over processes.

    ``fn`` must be a module-level function so it can be pickled.
    """
    if workers <= 1 or n < 2:
        return _run_chunk(fn, ctx, range(n))
    nchunks = min(n, 4 * workers)
    bounds = np.linspace(0, n, nchunks + 1).astype(int)
    chunks = [range(bounds[i], bounds[i + 1]) for i in range(nchunks)]
    out: list[T] = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(_run_chunk, [fn] * nchunks, [ctx] * nchunks, chunks):
            out.extend(part)
    return out


@dataclass(frozen=True)
class Estimate:
    mean: float
    se: float
    n: int

    def z(self, target: float) -> float:
        if self.se == 0.0:
            return 0.0 if self.mean == target else float("inf") * np.sign(self.mean - target)
        return (self.mean - target) / self.se


def estimate(samples: ArrayLike) -> Estimate:
    """Sample mean and its standard error (numpy sums pairwise)."""
    x = np.asarray(samples, dtype=np.float64)
    n = x.shape[0]
    if n and np.all(x == x[0]):
        return Estimate(float(x[0]), 0.0, n)  # exact for degenerate samples
    mean = float(np.mean(x))
    se = float(np.std(x, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return Estimate(mean, se, n)


def variance_estimate(samples: ArrayLike) -> Estimate:
    """Unbiased sample variance with a delta-method standard error."""
    x = np.asarray(samples, dtype=np.float64)
    n = x.shape[0]
    d = x - x.mean()
    var = float(np.sum(d * d) / (n - 1))
    m4 = float(np.mean(d**4))
    se = float(np.sqrt(max(m4 - var * var, 0.0) / n))
    return Estimate(var, se, n)


def covariance_estimate(a: ArrayLike, b: ArrayLike) -> Estimate:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    n = x.shape[0]
    prod = (x - x.mean()) * (y - y.mean())
    cov = float(np.sum(prod) / (n - 1))
    se = float(np.std(prod, ddof=1) / np.sqrt(n))
    return Estimate(cov, se, n)


def stack(rows: Sequence[NDArray[np.float64]]) -> NDArray[np.float64]:
    return np.stack([np.asarray(r, dtype=np.float64) for r in rows])
