from __future__ import annotations

import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from brw_enum import exact_law, untagged
from sbmre.env import EnvSpec, LawKind, OffspringLaw, sample_xi
from sbmre.particles import (Mode, ParticleField, RunConfig, SimulationError, _step_kernel, init_field,
                             iter_replica, record_rows, run, simulate_replica, snapshot_rows, step)
from sbmre.rng import new_stream
from sbmre.trace import trace_ensemble, trace_replica


def test_init_field_unit_mass_at_origin():
    f = init_field([(0, 100)])
    assert f.mass == 100 and f.as_dict() == {0: 100} and f.step_n == 0


def test_init_field_empty():
    f = init_field([])
    assert f.mass == 0 and f.as_dict() == {}


def test_init_field_two_sites():
    f = init_field([(0, 3), (2, 5)])
    assert f.mass == 8 and f.parity_ok()


def test_init_field_tagged_rows():
    f = init_field([(0, 2), (4, 1)], tagged=True)
    assert f.counts.shape[0] == 3
    assert f.tag_masses().tolist() == [1, 1, 1]
    assert f.as_dict() == {0: 2, 4: 1}


def test_init_field_rejects_negative():
    with pytest.raises(ValueError):
        init_field([(0, -1)])


def test_runconfig_warns_on_odd_sites():
    with pytest.warns(UserWarning):
        cfg = RunConfig(EnvSpec(16, 0.0, 0), [(1, 1)], 3)
    assert not cfg.parity_checked


def test_step_empty_field():
    f = init_field([])
    g, rec = step(f, EnvSpec(16, 1.0, 0), new_stream(0))
    assert g.mass == 0 and g.step_n == 1 and rec.sites.size == 0


def test_step_record_invariants():
    env = EnvSpec(64, 1.5, 4)
    rng = new_stream(9)
    f = init_field([(0, 500), (4, 300)])
    for _ in range(5):
        g, rec = step(f, env, rng)
        assert np.array_equal(rec.parents_left + rec.parents_right, rec.counts)
        assert np.all(rec.children_left % 2 == 0) and np.all(rec.children_right % 2 == 0)
        assert rec.xi.tolist() == [sample_xi(env, f.step_n, int(x)) for x in rec.sites]
        assert g.mass == int(rec.children_left.sum() + rec.children_right.sum())
        f = g


def test_step_beta_zero_mean_mass():
    cfg = RunConfig(EnvSpec(16, 0.0, 1), [(0, 1)], 1, 100_000, seed=1)
    mass = trace_ensemble(cfg).mass[:, -1]
    assert set(np.unique(mass)) <= {0.0, 2.0}
    assert abs(mass.mean() - 1.0) <= 3 * math.sqrt(1 / 1e5)


def test_step_conditioned_positive_sign():
    seed = next(s for s in range(100) if sample_xi(EnvSpec(16, 1.0, s), 0, 0) == 1)
    cfg = RunConfig(EnvSpec(16, 1.0, seed), [(0, 1)], 1, 100_000, Mode.QUENCHED, seed=2)
    mass = trace_ensemble(cfg).mass[:, -1]
    se = mass.std(ddof=1) / math.sqrt(mass.size)
    assert abs(mass.mean() - 1.5) <= 3 * se


def test_overflow_guard():
    counts = np.array([[100]], dtype=np.int64)
    new, *_, overflow = _step_kernel(counts, 0, 0, np.uint64(1), 0.0, True, np.zeros(1, np.int64), np.ones(1),
                                     np.zeros(1, np.int64), np.ones(1), new_stream(1), 10)
    assert overflow


def test_overflow_raises_with_context(monkeypatch):
    import sbmre.particles as P

    monkeypatch.setattr(P, "MAX_SITE_COUNT", 10)
    with pytest.raises(SimulationError, match="overflow"):
        step(init_field([(0, 100)]), EnvSpec(16, 0.0, 0), new_stream(0))


def test_run_deterministic():
    cfg = RunConfig(EnvSpec(16, 1.0, 3), [(0, 16)], 20, 2, seed=5, record_steps=True)
    a, b = run(cfg), run(cfg)
    assert list(snapshot_rows(a[0])) == list(snapshot_rows(b[0]))
    assert list(record_rows(a[1])) == list(record_rows(b[1]))


def test_run_horizon_zero():
    traj = simulate_replica(RunConfig(EnvSpec(16, 1.0, 3), [(0, 16)], 0), 0)
    assert len(traj.snapshots) == 1 and traj.snapshots[0].as_dict() == {0: 16}


def test_run_independent_of_workers():
    cfg = RunConfig(EnvSpec(16, 1.0, 3), [(0, 16)], 12, 6, seed=5)
    a = [list(snapshot_rows(t)) for t in run(cfg, workers=1)]
    b = [list(snapshot_rows(t)) for t in run(cfg, workers=3)]
    assert a == b


def test_annealed_vs_quenched_environment():
    cfg = RunConfig(EnvSpec(16, 1.0, 3), [(0, 1)], 1, 3, Mode.QUENCHED)
    assert cfg.replica_env(0) == cfg.replica_env(2)
    cfg = RunConfig(EnvSpec(16, 1.0, 3), [(0, 1)], 1, 3, Mode.ANNEALED)
    assert cfg.replica_env(0).seed != cfg.replica_env(1).seed


def test_mode_switch_keeps_moves():
    # same movement stream: with beta = 0 the environment is irrelevant
    a = RunConfig(EnvSpec(16, 0.0, 3), [(0, 16)], 10, 1, Mode.QUENCHED, seed=8)
    b = RunConfig(EnvSpec(16, 0.0, 3), [(0, 16)], 10, 1, Mode.ANNEALED, seed=8)
    assert list(snapshot_rows(simulate_replica(a, 0))) == list(snapshot_rows(simulate_replica(b, 0)))


def test_unit_mass_start_mass_martingale():
    cfg = RunConfig(EnvSpec(100, 1.0, 21), [(0, 100)], 100, 10_000, seed=21)
    ratio = trace_ensemble(cfg).mass / 100.0
    for n in (1, 10, 50, 100):
        col = ratio[:, n]
        se = col.std(ddof=1) / math.sqrt(col.size)
        assert abs(col.mean() - 1.0) <= 3 * se, n


@given(seed=st.integers(0, 2**32), beta=st.floats(0.0, 2.0), sites=st.lists(st.integers(-5, 5), min_size=1, max_size=4))
def test_parity_and_tags(seed, beta, sites):
    initial = [(2 * s, 1) for s in sites]
    cfg = RunConfig(EnvSpec(16, beta, seed), initial, 12, seed=seed, tagged=True)
    for f, _ in iter_replica(cfg, 0):
        assert f.parity_ok()
        assert f.counts.sum() == f.totals.sum()
        assert f.tag_masses().sum() == f.mass


def test_tags_sum_to_untagged_field():
    env = EnvSpec(16, 1.0, 4)
    init = [(0, 2), (2, 1)]
    tagged = RunConfig(env, init, 15, seed=3, tagged=True)
    for f, _ in iter_replica(tagged, 0):
        assert np.array_equal(f.counts.sum(axis=0), f.totals)
        assert f.counts.shape[0] == 3


def test_trace_matches_step_path():
    from sbmre.measure import MartingaleLedger, constant, gaussian_bump, linear_cutoff

    phis = [constant(), gaussian_bump(), linear_cutoff()]
    cfg = RunConfig(EnvSpec(64, 1.0, 7), [(0, 64)], 40, 3, seed=3)
    for r in range(3):
        tr = trace_replica(cfg, r, phis, ledger=True)
        it = iter_replica(cfg, r)
        f0, _ = next(it)
        leds = [MartingaleLedger.start(f0, p, 64, 1.0) for p in phis]
        prev, mass = f0, [f0.mass]
        for f, rec in it:
            for led in leds:
                led.update(prev, rec, f)
            prev = f
            mass.append(f.mass)
        assert np.array_equal(tr.mass, mass)
        assert np.array_equal(tr.final.counts, prev.counts) and tr.final.lo == prev.lo
        for k, led in enumerate(leds):
            ref = [led.M_b, led.M_e, led.M_s, led.C_term, led.bracket_b, led.bracket_e]
            assert np.allclose(tr.ledger[k, -1], ref, rtol=1e-12, atol=1e-15)
            assert tr.x_phi[k, -1] == pytest.approx(led.x_phi, rel=1e-12, abs=1e-15)


def test_trace_ensemble_independent_of_workers():
    cfg = RunConfig(EnvSpec(16, 1.0, 3), [(0, 2)], 8, 40, seed=5, tagged=True)
    a = trace_ensemble(cfg, workers=1)
    b = trace_ensemble(cfg, workers=3)
    assert a.mass.tobytes() == b.mass.tobytes() and a.tag_masses.tobytes() == b.tag_masses.tobytes()


def test_custom_law_per_parent_sampling():
    laws = {-1: OffspringLaw(((0, 0.5), (1, 0.2), (3, 0.3))), 1: OffspringLaw(((0, 0.3), (1, 0.4), (2, 0.3)))}
    seed = next(s for s in range(100) if sample_xi(EnvSpec(16, 0.0, s), 0, 0) == -1)
    env = EnvSpec(16, 0.0, seed, LawKind.CUSTOM, custom_laws=laws)
    cfg = RunConfig(env, [(0, 1)], 1, 50_000, Mode.QUENCHED, seed=1)
    mass = trace_ensemble(cfg).mass[:, -1]
    freq = Counter(mass.astype(int).tolist())
    assert set(freq) <= {0, 1, 3}
    for k, p in ((0, 0.5), (1, 0.2), (3, 0.3)):
        assert abs(freq[k] / mass.size - p) <= 4 * math.sqrt(p * (1 - p) / mass.size)


def _empirical_tv(initial, steps, beta, N, replicas, seed):
    exact = Counter()
    for st_, w in exact_law(initial, steps, beta, N).items():
        exact[untagged(st_)] += w
    cfg = RunConfig(EnvSpec(N, beta, seed), initial, steps, replicas, seed=seed)
    emp = Counter()
    for r in range(replicas):
        *_, (f, _) = iter_replica(cfg, r)
        emp[tuple(sorted(f.as_dict().items()))] += 1
    keys = set(exact) | set(emp)
    tv = 0.5 * sum(abs(emp[k] / replicas - exact.get(k, 0.0)) for k in keys)
    mc = 0.5 * sum(math.sqrt(p * (1 - p) / replicas) for p in exact.values())
    return tv, mc, set(emp) - set(exact)


@pytest.mark.parametrize("initial,steps,beta", [([(0, 1)], 3, 1.0), ([(0, 2)], 2, 1.0), ([(0, 1), (2, 1)], 2, 1.5),
                                                ([(0, 2)], 3, 0.0)])
def test_aggregation_matches_enumeration(initial, steps, beta):
    tv, mc, impossible = _empirical_tv(initial, steps, beta, 16, 20_000, 11)
    assert not impossible
    assert tv <= 3 * mc
