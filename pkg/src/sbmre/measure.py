"""Scaled measure-valued process, martingale decomposition and test kernels."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .particles import ParticleField, StepRecord

Fn = Callable[[NDArray[np.float64]], NDArray[np.float64]]

BOUNDED = "bounded"
C2B = "C2b"
RAPID = "rapidly_decreasing"


@dataclass(frozen=True)
class TestFunction:
    """Vectorized test function phi with optional analytic Laplacian."""

    __test__ = False  # keep pytest from collecting this class

    name: str
    eval: Fn
    laplacian_eval: Fn | None = None
    class_tags: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_tags", frozenset(self.class_tags))
        if RAPID in self.class_tags and not decays_rapidly(self.eval):
            raise ValueError(f"{self.name}: not rapidly decreasing on the probe grid")

    def __call__(self, x: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(self.eval(np.asarray(x, dtype=np.float64)), dtype=np.float64)

    def scaled(self, c: float) -> TestFunction:
        lap = self.laplacian_eval
        return TestFunction(
            f"{c:g}*{self.name}",
            lambda x: c * self.eval(x),
            None if lap is None else (lambda x: c * lap(x)),
            self.class_tags,
        )


def decays_rapidly(f: Fn, ps: tuple[float, ...] = (1.0, 2.0), half_width: float = 60.0) -> bool:
    """Spot check sup_x e^{p|x|}|f(x)| < inf by requiring decay at the grid ends."""
    x = np.linspace(-half_width, half_width, 4801)
    fx = np.abs(np.asarray(f(x), dtype=np.float64))
    if not np.all(np.isfinite(fx)):
        return False
    for p in ps:
        with np.errstate(over="ignore", invalid="ignore"):
            w = np.exp(p * np.abs(x) + np.log(np.maximum(fx, 1e-300)))
        w = np.where(fx > 0, w, 0.0)
        if not np.all(np.isfinite(w)):
            return False
        peak = w.max()
        if peak > 0 and max(w[0], w[-1]) > 1e-6 * peak:
            return False
    return True


# -- test-function library ---------------------------------------------------

def constant(c: float = 1.0) -> TestFunction:
    return TestFunction(f"const({c:g})", lambda x: np.full_like(x, c, dtype=np.float64),
                        lambda x: np.zeros_like(x, dtype=np.float64), {BOUNDED, C2B})


def zero() -> TestFunction:
    return TestFunction("zero", lambda x: np.zeros_like(x, dtype=np.float64),
                        lambda x: np.zeros_like(x, dtype=np.float64), {BOUNDED, C2B, RAPID})


def gaussian_bump(center: float = 0.0, var: float = 1.0, scale: float = 1.0) -> TestFunction:
    """scale * psi^center_var, the heat kernel at time ``var``."""
    if var <= 0:
        raise ValueError("bump variance must be positive")
    norm = scale / math.sqrt(2.0 * math.pi * var)

    def f(x):
        return norm * np.exp(-((x - center) ** 2) / (2.0 * var))

    def lap(x):
        d = x - center
        return f(x) * (d * d / var**2 - 1.0 / var)

    name = f"gauss({center:g},{var:g})" if scale == 1.0 else f"{scale:g}*gauss({center:g},{var:g})"
    return TestFunction(name, f, lap, {BOUNDED, C2B, RAPID})


def smooth_exp_decay(rate: float = 1.0) -> TestFunction:
    """exp(-rate * sqrt(1 + x^2)): a C^2 stand-in for e^{-|x|}."""

    def f(x):
        return np.exp(-rate * np.sqrt(1.0 + x * x))

    def lap(x):
        s = np.sqrt(1.0 + x * x)
        d1 = -rate * x / s
        d2 = -rate / s**3
        return f(x) * (d1 * d1 + d2)

    return TestFunction(f"expdecay({rate:g})", f, lap, {BOUNDED, C2B})


def poly_cutoff(coeffs: tuple[float, ...], width: float = 2.0) -> TestFunction:
    """Polynomial sum_k coeffs[k] x^k damped by exp(-(x/width)^2)."""
    poly = np.polynomial.Polynomial(coeffs)
    dpoly = poly.deriv()
    d2poly = dpoly.deriv()
    a = 1.0 / width**2

    def f(x):
        return poly(x) * np.exp(-a * x * x)

    def lap(x):
        g = np.exp(-a * x * x)
        g1 = -2.0 * a * x * g
        g2 = (4.0 * a * a * x * x - 2.0 * a) * g
        return d2poly(x) * g + 2.0 * dpoly(x) * g1 + poly(x) * g2

    return TestFunction(f"poly{tuple(coeffs)}*cut({width:g})", f, lap, {BOUNDED, C2B, RAPID})


def linear_cutoff(width: float = 2.0) -> TestFunction:
    """y * cutoff: odd, bounded, rapidly decreasing."""
    return poly_cutoff((0.0, 1.0), width)


def identity() -> TestFunction:
    return TestFunction("y", lambda x: np.asarray(x, dtype=np.float64), lambda x: np.zeros_like(x))


def square() -> TestFunction:
    return TestFunction("y^2", lambda x: np.asarray(x, dtype=np.float64) ** 2,
                        lambda x: np.full_like(x, 2.0, dtype=np.float64))


# -- measure functionals -----------------------------------------------------

def measure_apply(field: ParticleField, N: int, phi: TestFunction) -> float:
    """X^{(N)}(phi) = (1/N) sum_x B_x phi(x / sqrt N)."""
    sites, counts = field.occupied()
    if sites.size == 0:
        return 0.0
    return float(np.sum(counts * phi(sites / math.sqrt(N)))) / N


def discrete_generator(phi: TestFunction, N: int, x: ArrayLike) -> NDArray[np.float64] | float:
    """A^N phi(x) = N [phi(x + N^-1/2) + phi(x - N^-1/2) - 2 phi(x)] / 2."""
    h = 1.0 / math.sqrt(N)
    xa = np.asarray(x, dtype=np.float64)
    out = 0.5 * N * (phi(xa + h) + phi(xa - h) - 2.0 * phi(xa))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Increments:
    d_mb: float
    d_me: float
    d_ms: float
    d_c: float

    @property
    def total(self) -> float:
        return self.d_mb + self.d_me + self.d_ms + self.d_c


def martingale_increments(rec: StepRecord, phi: TestFunction, N: int, beta: float) -> Increments:
    """Split X_{n+1}(phi) - X_n(phi) into branching, environment, spatial and drift parts."""
    if not rec.example_law:
        raise ValueError("martingale brackets assume the two-point Example offspring law")
    if rec.sites.size == 0:
        return Increments(0.0, 0.0, 0.0, 0.0)
    root = math.sqrt(N)
    x = rec.sites.astype(np.float64)
    f_left = phi((x - 1.0) / root)
    f_right = phi((x + 1.0) / root)
    tilt = beta * rec.xi.astype(np.float64) / N**0.25
    pl = rec.parents_left.astype(np.float64)
    pr = rec.parents_right.astype(np.float64)
    cl = rec.children_left.astype(np.float64)
    cr = rec.children_right.astype(np.float64)
    b = rec.counts.astype(np.float64)
    moved = pl * f_left + pr * f_right

    d_mb = np.sum((cl - pl * (1.0 + tilt)) * f_left + (cr - pr * (1.0 + tilt)) * f_right) / N
    d_me = np.sum(tilt * moved) / N
    d_ms = np.sum(moved - 0.5 * b * (f_left + f_right)) / N
    d_c = np.sum(b * discrete_generator(phi, N, x / root)) / (N * N)
    return Increments(float(d_mb), float(d_me), float(d_ms), float(d_c))


def bracket_increments(field: ParticleField, phi: TestFunction, N: int, beta: float) -> tuple[float, float]:
    """Exact conditional second moments of the next branching/environment increments."""
    sites, counts = field.occupied()
    if sites.size == 0:
        return 0.0, 0.0
    root = math.sqrt(N)
    x = sites.astype(np.float64)
    fl = phi((x - 1.0) / root)
    fr = phi((x + 1.0) / root)
    mu1 = 0.5 * (fl + fr)
    mu2 = 0.5 * (fl * fl + fr * fr)
    b = counts.astype(np.float64)
    d_b = (1.0 - beta**2 / root) / N**2 * np.sum(b * mu2)
    d_e = beta**2 / N**2.5 * np.sum(b * (b - 1.0) * mu1 * mu1 + b * mu2)
    return float(d_b), float(d_e)


@dataclass
class MartingaleLedger:
    """Running decomposition X_t(phi) - X_0(phi) = M_b + M_e + M_s + C for one replica."""

    phi: TestFunction
    N: int
    beta: float
    x0: float = 0.0
    x_phi: float = 0.0
    M_b: float = 0.0
    M_e: float = 0.0
    M_s: float = 0.0
    C_term: float = 0.0
    bracket_b: float = 0.0
    bracket_e: float = 0.0
    qv_b: float = 0.0
    qv_e: float = 0.0
    steps: int = 0
    max_residual: float = 0.0
    history: list[tuple[float, ...]] | None = None

    @classmethod
    def start(cls, field0: ParticleField, phi: TestFunction, N: int, beta: float,
              keep_history: bool = False) -> MartingaleLedger:
        x0 = measure_apply(field0, N, phi)
        led = cls(phi, N, beta, x0=x0, x_phi=x0)
        if keep_history:
            led.history = [led.row()]
        return led

    def update(self, before: ParticleField, rec: StepRecord, after: ParticleField) -> Increments:
        inc = martingale_increments(rec, self.phi, self.N, self.beta)
        db, de = bracket_increments(before, self.phi, self.N, self.beta)
        x_new = measure_apply(after, self.N, self.phi)
        dx = x_new - self.x_phi
        scale = max(abs(self.x_phi), abs(x_new), _abs_mass(before, self.N, self.phi), 1e-300)
        self.max_residual = max(self.max_residual, abs(dx - inc.total) / scale)
        self.M_b += inc.d_mb
        self.M_e += inc.d_me
        self.M_s += inc.d_ms
        self.C_term += inc.d_c
        self.bracket_b += db
        self.bracket_e += de
        self.qv_b += inc.d_mb**2
        self.qv_e += inc.d_me**2
        self.x_phi = x_new
        self.steps += 1
        if self.history is not None:
            self.history.append(self.row())
        return inc

    def row(self) -> tuple[float, ...]:
        return (self.steps, self.M_b, self.M_e, self.M_s, self.C_term,
                self.bracket_b, self.bracket_e, self.x_phi)

    @property
    def identity_residual(self) -> float:
        """|X_t - X_0 - (M_b + M_e + M_s + C)| for the cumulative sums."""
        return abs(self.x_phi - self.x0 - (self.M_b + self.M_e + self.M_s + self.C_term))


def _abs_mass(field: ParticleField, N: int, phi: TestFunction) -> float:
    sites, counts = field.occupied()
    if sites.size == 0:
        return 0.0
    x = sites / math.sqrt(N)
    h = 1.0 / math.sqrt(N)
    vals = np.abs(phi(x)) + np.abs(phi(x - h)) + np.abs(phi(x + h))
    return float(np.sum(counts * vals)) / N


# -- density and kernels -----------------------------------------------------

@dataclass(frozen=True)
class DensityField:
    """Piecewise-constant density u^{(N)} with height B/(2 sqrt N) per occupied site."""

    step_n: int
    N: int
    centers: NDArray[np.float64]
    heights: NDArray[np.float64]

    @property
    def cell_width(self) -> float:
        return 2.0 / math.sqrt(self.N)

    def integral(self) -> float:
        return float(self.cell_width * np.sum(self.heights))

    def __call__(self, y: ArrayLike) -> NDArray[np.float64]:
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        out = np.zeros_like(y)
        half = 0.5 * self.cell_width
        for c, hgt in zip(self.centers, self.heights):
            out[(y >= c - half) & (y < c + half)] += hgt
        return out


def density(field: ParticleField, N: int) -> DensityField:
    sites, counts = field.occupied()
    root = math.sqrt(N)
    return DensityField(field.step_n, N, sites / root, counts / (2.0 * root))


def gaussian_kernel(x: ArrayLike, t: ArrayLike, y: ArrayLike) -> NDArray[np.float64] | float:
    """psi^x_t(y) = exp(-(y - x)^2 / 2t) / sqrt(2 pi t)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("kernel time must be positive")
    d = np.asarray(y, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    out = np.exp(-d * d / (2.0 * t)) / np.sqrt(2.0 * np.pi * t)
    return float(out) if out.ndim == 0 else out


def kernel_inequality_violations(x, y, t, eps, p, delta, slack: float = 1e-12) -> NDArray[np.bool_]:
    """Pointwise check of |psi_{t+e} - psi_t|^p <= (e t^-3/2)^d (psi_{t+e}^{p-d} + psi_t^{p-d})."""
    t = np.asarray(t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    a = gaussian_kernel(x, t + eps, y)
    b = gaussian_kernel(x, t, y)
    lhs = np.abs(a - b) ** p
    rhs = (eps * t**-1.5) ** delta * (a ** (p - delta) + b ** (p - delta))
    return np.atleast_1d(lhs > rhs + slack)


def kernel_inequality_check(samples: int, rng: np.random.Generator) -> int:
    """Count violations over random admissible (x, y, t, eps, p, delta)."""
    t = rng.uniform(0.05, 5.0, samples)
    eps = rng.uniform(0.0, 1.0, samples)
    p = rng.uniform(0.5, 4.0, samples)
    delta = rng.uniform(0.0, 1.0, samples) * p
    x = rng.uniform(-5.0, 5.0, samples)
    y = rng.uniform(-5.0, 5.0, samples)
    return int(np.count_nonzero(kernel_inequality_violations(x, y, t, eps, p, delta)))
