"""Counter-based random streams and exact binomial sampling (numba kernels).

A stream is a 64-bit key plus a 64-bit counter held in a ``uint64[2]`` array;
draw i is ``splitmix64_finalize(key + i * golden)``. Streams for distinct
(seed, purpose, replica) triples come from hashing those words into the key,
so any replica can be regenerated alone, on any worker, in any order.
"""
from __future__ import annotations

import math

import numba as nb
import numpy as np
from numpy.typing import NDArray

from .env import GOLDEN, MASK64, splitmix64_finalize

_G = np.uint64(GOLDEN)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0

INVERSION_MAX_MEAN = 30.0


def derive_key(seed: int, *words: int) -> int:
    """Hash (seed, words...) into a 64-bit stream key."""
    h = splitmix64_finalize(int(seed) & MASK64)
    for i, w in enumerate(words):
        h = splitmix64_finalize(h ^ splitmix64_finalize((int(w) + (i + 1) * GOLDEN) & MASK64))
    return h


def new_stream(seed: int, *words: int) -> NDArray[np.uint64]:
    return np.array([derive_key(seed, *words), 0], dtype=np.uint64)


@nb.njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True, inline="always")
def next_u64(state):
    state[1] += np.uint64(1)
    return mix64(state[0] + state[1] * _G)


@nb.njit(cache=True, inline="always")
def next_double(state):
    return float(next_u64(state) >> np.uint64(11)) * _INV53


@nb.njit(cache=True)
def _binomial_inversion(n, p, state):
    # p <= 1/2 and n p < INVERSION_MAX_MEAN
    q = 1.0 - p
    qn = math.exp(n * math.log(q))
    npq = n * p
    bound = min(float(n), npq + 10.0 * math.sqrt(npq * q + 1.0))
    x = 0
    px = qn
    u = next_double(state)
    while u > px:
        x += 1
        if x > bound:
            x = 0
            px = qn
            u = next_double(state)
        else:
            u -= px
            px = ((n - x + 1) * p * px) / (x * q)
    return x


@nb.njit(cache=True)
def _stirling_tail(f, f2):
    return (13680.0 - (462.0 - (132.0 - (99.0 - 140.0 / f2) / f2) / f2) / f2) / f / 166320.0


@nb.njit(cache=True)
def _binomial_btpe(n, p, state):
    # Kachitvichyanukul-Schmeiser BTPE; p <= 1/2 and n p >= INVERSION_MAX_MEAN
    r = p
    q = 1.0 - r
    fm = n * r + r
    m = int(math.floor(fm))
    p1 = math.floor(2.195 * math.sqrt(n * r * q) - 4.6 * q) + 0.5
    xm = m + 0.5
    xl = xm - p1
    xr = xm + p1
    c = 0.134 + 20.5 / (15.3 + m)
    a = (fm - xl) / (fm - xl * r)
    laml = a * (1.0 + a / 2.0)
    a = (xr - fm) / (xr * q)
    lamr = a * (1.0 + a / 2.0)
    p2 = p1 * (1.0 + 2.0 * c)
    p3 = p2 + c / laml
    p4 = p3 + c / lamr
    nrq = n * r * q
    while True:
        u = next_double(state) * p4
        v = next_double(state)
        if u <= p1:
            return int(math.floor(xm - p1 * v + u))
        if u <= p2:
            x = xl + (u - p1) / c
            v = v * c + 1.0 - abs(m - x + 0.5) / p1
            if v > 1.0:
                continue
            y = int(math.floor(x))
        elif u <= p3:
            if v == 0.0:
                continue
            y = int(math.floor(xl + math.log(v) / laml))
            if y < 0:
                continue
            v = v * (u - p2) * laml
        else:
            if v == 0.0:
                continue
            y = int(math.floor(xr - math.log(v) / lamr))
            if y > n:
                continue
            v = v * (u - p3) * lamr

        k = abs(y - m)
        if k <= 20 or k >= nrq / 2.0 - 1.0:
            s = r / q
            aa = s * (n + 1)
            F = 1.0
            if m < y:
                for i in range(m + 1, y + 1):
                    F *= aa / i - s
            elif m > y:
                for i in range(y + 1, m + 1):
                    F /= aa / i - s
            if v > F:
                continue
            return y

        rho = (k / nrq) * ((k * (k / 3.0 + 0.625) + 0.16666666666666666) / nrq + 0.5)
        t = -k * k / (2.0 * nrq)
        A = math.log(v)
        if A < t - rho:
            return y
        if A > t + rho:
            continue
        x1 = y + 1.0
        f1 = m + 1.0
        z = n + 1.0 - m
        w = n - y + 1.0
        bound = (xm * math.log(f1 / x1) + (n - m + 0.5) * math.log(z / w)
                 + (y - m) * math.log(w * r / (x1 * q))
                 + _stirling_tail(f1, f1 * f1) + _stirling_tail(z, z * z)
                 + _stirling_tail(x1, x1 * x1) + _stirling_tail(w, w * w))
        if A > bound:
            continue
        return y


@nb.njit(cache=True)
def binomial(n, p, state):
    """Exact Binomial(n, p) draw from the stream ``state``."""
    if n <= 0 or p <= 0.0:
        return 0
    if p >= 1.0:
        return n
    flip = p > 0.5
    r = 1.0 - p if flip else p
    if n * r < INVERSION_MAX_MEAN:
        y = _binomial_inversion(n, r, state)
    else:
        y = _binomial_btpe(n, r, state)
    return n - y if flip else y


@nb.njit(cache=True)
def binomial_many(ns, p, state):
    out = np.empty(ns.shape[0], dtype=np.int64)
    for i in range(ns.shape[0]):
        out[i] = binomial(ns[i], p, state)
    return out


@nb.njit(cache=True)
def uniforms(count, state):
    out = np.empty(count)
    for i in range(count):
        out[i] = next_double(state)
    return out


@nb.njit(cache=True, inline="always")
def xi_hash(seed, n, x):
    """xi(n, x) in {-1, +1}; same bits as ``env.sample_xi``."""
    zz = np.uint64((x << 1) ^ (x >> 63))
    z = np.uint64(seed) ^ (np.uint64(n) * _G) ^ (zz * _M1)
    return 1 if mix64(z) & np.uint64(1) else -1


def philox(seed: int, *key: int) -> np.random.Generator:
    """numpy Philox generator addressed by (seed, key...), for vectorized draws."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
