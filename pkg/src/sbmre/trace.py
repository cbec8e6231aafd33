"""Fused per-replica kernels for ensemble observables.

``particles.step`` builds Python objects every step, which dominates the cost
of large ensembles. The kernels here run the same ``_step_kernel`` (same draw
order, so bit-identical fields) and accumulate X_n(phi), the martingale
decomposition and its exact brackets in place. Test functions are tabulated
once on every lattice site the run can reach.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numba as nb
import numpy as np
from numpy.typing import NDArray

from .ensemble import map_replicas
from .env import LawKind
from .measure import TestFunction
from .particles import (MAX_SITE_COUNT, ParticleField, RunConfig, SimulationError, _law_tables,
                        _step_kernel, init_field)

# ledger columns
MB, ME, MS, C, BRB, BRE = range(6)


@nb.njit(cache=True)
def _psum(a):
    # pairwise summation: plain sums over blocks of 16, then a halving tree
    n = a.shape[0]
    m = (n + 15) // 16
    if m == 0:
        return 0.0
    buf = np.zeros(m)
    for b in range(m):
        s = 0.0
        for i in range(16 * b, min(16 * b + 16, n)):
            s += a[i]
        buf[b] = s
    while m > 1:
        half = (m + 1) // 2
        for i in range(m // 2):
            buf[i] = buf[2 * i] + buf[2 * i + 1]
        if m % 2:
            buf[half - 1] = buf[m - 1]
        m = half
    return buf[0]


@nb.njit(cache=True)
def _trim(lo, counts):
    T, L = counts.shape
    first = -1
    last = -1
    for j in range(L):
        for t in range(T):
            if counts[t, j] != 0:
                if first < 0:
                    first = j
                last = j
                break
    if first < 0:
        return 0, counts[:, :0].copy()
    return lo + first, counts[:, first:last + 1].copy()


@nb.njit(cache=True)
def _x_phi(counts, lo, tab, tab_lo, N):
    T, L = counts.shape
    terms = np.zeros(L)
    for j in range(L):
        tot = 0
        for t in range(T):
            tot += counts[t, j]
        if tot:
            terms[j] = tot * tab[lo + j - tab_lo]
    return _psum(terms) / N


@nb.njit(cache=True)
def _trace_kernel(counts, lo, steps, env_seed, half_tilt, example, ksm, cdfm, ksp, cdfp, state,
                  tabs, tab_lo, N, beta, do_ledger):
    K = tabs.shape[0]
    mass = np.zeros(steps + 1)
    xphi = np.zeros((K, steps + 1))
    led = np.zeros((K, steps + 1, 6))
    maxres = np.zeros(K)
    root = math.sqrt(N)
    tilt_scale = beta / N**0.25
    b_scale = (1.0 - beta * beta / root) / (N * N)
    e_scale = beta * beta / N**2.5

    mass[0] = counts.sum()
    for k in range(K):
        xphi[k, 0] = _x_phi(counts, lo, tabs[k], tab_lo, N)
    overflow_at = -1
    for n in range(steps):
        T, L = counts.shape
        new, xi, pl, cl, cr, overflow = _step_kernel(counts, lo, n, env_seed, half_tilt, example,
                                                     ksm, cdfm, ksp, cdfp, state, MAX_SITE_COUNT)
        if overflow:
            overflow_at = n + 1
            break
        new_lo, new = _trim(lo - 1, new)
        mass[n + 1] = new.sum()
        for k in range(K):
            tab = tabs[k]
            x_new = _x_phi(new, new_lo, tab, tab_lo, N)
            xphi[k, n + 1] = x_new
            if not do_ledger:
                continue
            t_mb = np.zeros(L)
            t_me = np.zeros(L)
            t_ms = np.zeros(L)
            t_c = np.zeros(L)
            t_bb = np.zeros(L)
            t_be = np.zeros(L)
            t_abs = np.zeros(L)
            for j in range(L):
                tot = 0
                a = 0
                ca = 0
                cb = 0
                for t in range(T):
                    tot += counts[t, j]
                    a += pl[t, j]
                    ca += cl[t, j]
                    cb += cr[t, j]
                if tot == 0:
                    continue
                b = tot - a
                i0 = lo + j - tab_lo
                fl = tab[i0 - 1]
                f0 = tab[i0]
                fr = tab[i0 + 1]
                tilt = tilt_scale * xi[j]
                moved = a * fl + b * fr
                t_mb[j] = (ca - a * (1.0 + tilt)) * fl + (cb - b * (1.0 + tilt)) * fr
                t_me[j] = tilt * moved
                t_ms[j] = moved - 0.5 * tot * (fl + fr)
                t_c[j] = tot * 0.5 * N * (fl + fr - 2.0 * f0)
                mu1 = 0.5 * (fl + fr)
                mu2 = 0.5 * (fl * fl + fr * fr)
                t_bb[j] = tot * mu2
                t_be[j] = tot * (tot - 1.0) * mu1 * mu1 + tot * mu2
                t_abs[j] = tot * (abs(fl) + abs(f0) + abs(fr))
            d_mb = _psum(t_mb) / N
            d_me = _psum(t_me) / N
            d_ms = _psum(t_ms) / N
            d_c = _psum(t_c) / (N * N)
            led[k, n + 1, MB] = led[k, n, MB] + d_mb
            led[k, n + 1, ME] = led[k, n, ME] + d_me
            led[k, n + 1, MS] = led[k, n, MS] + d_ms
            led[k, n + 1, C] = led[k, n, C] + d_c
            led[k, n + 1, BRB] = led[k, n, BRB] + b_scale * _psum(t_bb)
            led[k, n + 1, BRE] = led[k, n, BRE] + e_scale * _psum(t_be)
            x_old = xphi[k, n]
            scale = max(abs(x_old), abs(x_new), _psum(t_abs) / N, 1e-300)
            res = abs((x_new - x_old) - (d_mb + d_me + d_ms + d_c)) / scale
            if res > maxres[k]:
                maxres[k] = res
        counts = new
        lo = new_lo
    return mass, xphi, led, maxres, counts, lo, overflow_at


def phi_tables(phis: Sequence[TestFunction], N: int, site_lo: int, site_hi: int) -> NDArray[np.float64]:
    """phi(x / sqrt N) for every phi and every site x in [site_lo, site_hi]."""
    x = np.arange(site_lo, site_hi + 1, dtype=np.float64) / math.sqrt(N)
    if not phis:
        return np.zeros((0, x.size))
    return np.stack([phi(x) for phi in phis])


@dataclass
class ReplicaTrace:
    replica: int
    mass: NDArray[np.float64]           # B_n, n = 0..horizon
    x_phi: NDArray[np.float64]          # (K, horizon + 1)
    ledger: NDArray[np.float64] | None  # (K, horizon + 1, 6) cumulative Mb, Me, Ms, C, <Mb>, <Me>
    max_residual: NDArray[np.float64]   # (K,)
    final: ParticleField


@dataclass
class EnsembleTrace:
    mass: NDArray[np.float64]           # (R, horizon + 1)
    x_phi: NDArray[np.float64]          # (R, K, horizon + 1)
    ledger: NDArray[np.float64] | None  # (R, K, horizon + 1, 6)
    max_residual: NDArray[np.float64]   # (R, K)
    tag_masses: NDArray[np.float64]     # (R, tags) at the horizon


@dataclass(frozen=True)
class _Job:
    cfg: RunConfig
    tabs: NDArray[np.float64]
    tab_lo: int
    ledger: bool


def _make_job(cfg: RunConfig, phis: Sequence[TestFunction], ledger: bool) -> _Job:
    if ledger and cfg.env.law_kind is not LawKind.EXAMPLE:
        raise ValueError("martingale ledger requires the Example offspring law")
    sites = [s for s, c in cfg.initial if c] or [0]
    lo = min(sites) - cfg.horizon_steps - 1
    hi = max(sites) + cfg.horizon_steps + 1
    return _Job(cfg, phi_tables(phis, cfg.env.scale_N, lo, hi), lo, ledger)


def _run_job(job: _Job, r: int) -> ReplicaTrace:
    cfg = job.cfg
    env = cfg.replica_env(r)
    f0 = init_field(cfg.initial, cfg.tagged)
    example = env.law_kind is LawKind.EXAMPLE
    half_tilt = env.beta / (2.0 * env.quarter_root) if example else 0.0
    mass, xphi, led, maxres, counts, lo, overflow_at = _trace_kernel(
        f0.counts, f0.lo, cfg.horizon_steps, np.uint64(env.seed), half_tilt, example,
        *_law_tables(env), cfg.replica_rng(r), job.tabs, job.tab_lo, env.scale_N, env.beta, job.ledger)
    if overflow_at >= 0:
        raise SimulationError(f"replica {r}: site count overflow at step {overflow_at}")
    final = ParticleField(cfg.horizon_steps, lo, counts, cfg.tagged)
    return ReplicaTrace(r, mass, xphi, led if job.ledger else None, maxres, final)


def trace_replica(cfg: RunConfig, r: int, phis: Sequence[TestFunction] = (),
                  ledger: bool = False) -> ReplicaTrace:
    return _run_job(_make_job(cfg, phis, ledger), r)


def _summarize(job: _Job, r: int):
    tr = _run_job(job, r)
    return tr.mass, tr.x_phi, tr.ledger, tr.max_residual, tr.final.tag_masses()


def trace_ensemble(cfg: RunConfig, phis: Sequence[TestFunction] = (), ledger: bool = False,
                   workers: int = 1) -> EnsembleTrace:
    """Run all replicas of ``cfg`` and stack their traces in replica order."""
    job = _make_job(cfg, phis, ledger)
    parts = map_replicas(_summarize, job, cfg.replicas, workers)
    ntags = max(len(p[4]) for p in parts)
    tags = np.zeros((len(parts), ntags))
    for i, p in enumerate(parts):
        tags[i, : len(p[4])] = p[4]
    return EnsembleTrace(
        mass=np.stack([p[0] for p in parts]),
        x_phi=np.stack([p[1] for p in parts]),
        ledger=np.stack([p[2] for p in parts]) if ledger else None,
        max_residual=np.stack([p[3] for p in parts]),
        tag_masses=tags,
    )
