"""Exact law of the branching walk by per-particle enumeration (tiny systems only).

Every particle independently picks a direction and, given the fresh fair sign
of its departure site, has 0 or 2 children. States are tagged occupation
multisets, so the law of tag products is available too.
"""
from __future__ import annotations

import itertools
from collections import defaultdict
from fractions import Fraction

State = tuple  # sorted tuple of ((tag, site), count)


def _step(state: State, beta_over_quarter_root: float) -> dict[State, float]:
    sites = sorted({s for (_, s), _ in state})
    out: dict[State, float] = defaultdict(float)
    for signs in itertools.product((-1, 1), repeat=len(sites)):
        xi = dict(zip(sites, signs))
        partial: dict[State, float] = {(): 0.5 ** len(sites)}
        for (tag, site), count in state:
            p2 = 0.5 + 0.5 * beta_over_quarter_root * xi[site]
            for _ in range(count):
                nxt: dict[State, float] = defaultdict(float)
                for st, w in partial.items():
                    for d in (-1, 1):
                        for k, pk in ((0, 1.0 - p2), (2, p2)):
                            if pk == 0.0:
                                continue
                            counts = dict(st)
                            if k:
                                key = (tag, site + d)
                                counts[key] = counts.get(key, 0) + k
                            nxt[tuple(sorted(counts.items()))] += w * 0.5 * pk
                partial = nxt
        for st, w in partial.items():
            out[st] += w
    return dict(out)


def exact_law(initial: list[tuple[int, int]], steps: int, beta: float, N: int,
              tagged: bool = False) -> dict[State, float]:
    """Law of the (tagged) occupation after ``steps`` steps."""
    counts: dict[tuple[int, int], int] = {}
    tag = 0
    for site, c in initial:
        for _ in range(c):
            key = (tag if tagged else 0, site)
            counts[key] = counts.get(key, 0) + 1
            tag += 1
    law = {tuple(sorted(counts.items())): 1.0}
    b = beta / N**0.25
    for _ in range(steps):
        nxt: dict[State, float] = defaultdict(float)
        for st, w in law.items():
            if not st:
                nxt[st] += w
                continue
            for s2, w2 in _step(st, b).items():
                nxt[s2] += w * w2
        law = dict(nxt)
    return law


def untagged(state: State) -> tuple:
    agg: dict[int, int] = defaultdict(int)
    for (_, s), c in state:
        agg[s] += c
    return tuple(sorted(agg.items()))


def brute_pair_functional(n: int, lam: Fraction | float, first_time: int = 1):
    """E[(1+lam)^{#collisions}] by listing all 4^n pairs of walk paths."""
    total = 0
    for a in itertools.product((-1, 1), repeat=n):
        for b in itertools.product((-1, 1), repeat=n):
            y1 = y2 = 0
            hits = 1 if first_time <= 0 else 0
            for i in range(n):
                y1 += a[i]
                y2 += b[i]
                if i + 1 >= first_time and y1 == y2:
                    hits += 1
            total += (1 + lam) ** hits
    return total / 4**n
