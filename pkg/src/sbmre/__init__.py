"""Critical branching random walk in a space-time random environment.

Lattice simulator, scaled measure observables, exact random-walk oracles,
finite-difference SPDE solvers and a Laplace-functional duality harness.
"""
from __future__ import annotations

from .env import EnvSpec, LawKind, OffspringLaw, audit_assumption_a, law_moment, offspring_pmf, sample_xi
from .particles import Mode, ParticleField, RunConfig, StepRecord, init_field, run, step

__all__ = [
    "EnvSpec", "LawKind", "OffspringLaw", "audit_assumption_a", "law_moment", "offspring_pmf", "sample_xi",
    "Mode", "ParticleField", "RunConfig", "StepRecord", "init_field", "run", "step",
]

__version__ = "0.1.0"
