import numpy as np
import pytest
from scipy import stats

from chordlab.engine import (
    ChurnConfig,
    Event,
    EventKind,
    apply_event,
    init_ring,
    next_event,
    run_events,
    run_trial,
    trial_config,
)
from chordlab.observatory import census


def test_config_validation():
    for bad in (dict(K=100), dict(N0=1), dict(r=0), dict(alpha=1.0), dict(alpha=0), dict(S=0),
                dict(lambda_f=-1), dict(K=16, N0=16)):
        with pytest.raises(ValueError):
            ChurnConfig(**bad)


def test_event_probabilities():
    cfg = ChurnConfig(r=500, alpha=0.5)
    p = cfg.event_probabilities()
    assert p[EventKind.SUCCESSOR_STABILIZATION] == pytest.approx(0.5 * 500 / 502)
    assert p[EventKind.JOIN] == p[EventKind.FAILURE] == pytest.approx(1 / 502)
    assert p.sum() == pytest.approx(1.0)


def test_rates():
    cfg = ChurnConfig(r=50, lambda_f=2.0)
    assert cfg.lambda_j == 2.0 and cfg.lambda_s == 100.0 and cfg.rate_per_node == 104.0


def test_init_ring_full_population():
    st = init_ring(ChurnConfig(K=16, N0=15, S=3, seed=1))
    keys = st.ring.alive_keys()
    for k in keys:
        assert st.ring.node(int(k)).successors[0] == int(keys[(np.searchsorted(keys, k) + 1) % len(keys)])


def test_init_ring_is_converged():
    st = init_ring(ChurnConfig(K=2**12, N0=100, seed=3))
    c = census(st.snapshot())
    assert c.wrong.sum() == 0 and c.finger_dead.sum() == 0
    for k in st.ring.alive_keys()[:10]:
        assert st.ring.node(int(k)).successors == st.ring.true_successors(int(k))


def test_init_population_mean():
    sizes = [init_ring(ChurnConfig(K=2**14, N0=500, seed=s)).alive_count for s in range(40)]
    var = 500 * (1 - 500 / 2**14)
    assert abs(np.mean(sizes) - 500) < 3 * np.sqrt(var / 40)


@pytest.mark.parametrize("seed", range(10))
def test_initial_gaps_are_geometric(seed):
    cfg = ChurnConfig(K=2**20, N0=1000, seed=seed)
    keys = init_ring(cfg).ring.alive_keys()
    gaps = np.diff(np.concatenate([keys, [keys[0] + cfg.K]]))
    reference = np.random.default_rng(10_000 + seed).geometric(cfg.N0 / cfg.K, 20_000)
    assert stats.ks_2samp(gaps, reference).pvalue > 0.01


def test_alpha_near_one_never_fixes_fingers():
    cfg = ChurnConfig(K=2**12, N0=100, r=50, alpha=1 - 1e-13, seed=0)
    st = init_ring(cfg)
    run_events(st, 10**6)
    assert st.event_counts["FINGER_STABILIZATION"] == 0


def test_failure_makes_predecessor_wrong():
    st = init_ring(ChurnConfig(K=2**12, N0=50, seed=2))
    keys = st.ring.alive_keys()
    apply_event(st, Event(EventKind.FAILURE, int(keys[5])))
    c = census(st.snapshot())
    assert c.wrong[0] == 1 and c.dead[0] == 1
    assert st.ring.node(int(keys[4])).successors[0] == int(keys[5])


def test_successor_stabilization_repairs_dead_successor():
    st = init_ring(ChurnConfig(K=2**12, N0=50, seed=2))
    keys = st.ring.alive_keys()
    apply_event(st, Event(EventKind.FAILURE, int(keys[5])))
    apply_event(st, Event(EventKind.SUCCESSOR_STABILIZATION, int(keys[4])))
    assert st.ring.node(int(keys[4])).successors[0] == int(keys[6])
    assert census(st.snapshot()).wrong[0] == 0


def test_join_into_stale_gap_keeps_wrong_count():
    st = init_ring(ChurnConfig(K=2**12, N0=50, seed=4))
    keys = st.ring.alive_keys()
    x, z = int(keys[3]), int(keys[4])
    assert z - x > 3
    apply_event(st, Event(EventKind.JOIN, x + 2, contact=int(keys[0])))
    assert census(st.snapshot()).wrong[0] == 1
    # x already points past the first joiner; a second join in front of it
    # leaves the count alone and the newcomer is still correct
    apply_event(st, Event(EventKind.JOIN, x + 1, contact=int(keys[0])))
    assert census(st.snapshot()).wrong[0] == 1
    assert st.ring.node(x + 1).successors[0] == x + 2
    apply_event(st, Event(EventKind.JOIN, x + 3, contact=int(keys[0])))
    assert st.ring.node(x + 3).successors[0] == z
    assert census(st.snapshot()).wrong[0] == 2


def test_next_event_targets():
    st = init_ring(ChurnConfig(K=2**12, N0=100, r=2, seed=5))
    for _ in range(200):
        ev, dt = next_event(st)
        assert dt > 0
        if ev.kind == EventKind.JOIN:
            assert not st.ring.is_alive(ev.subject) and st.ring.is_alive(ev.contact)
        else:
            assert st.ring.is_alive(ev.subject)
        if ev.kind == EventKind.FINGER_STABILIZATION:
            assert 1 <= ev.finger <= 12
        apply_event(st, ev, dt)


def test_event_multinomial():
    cfg = ChurnConfig(K=2**16, N0=500, r=20, alpha=0.3, seed=7)
    st = init_ring(cfg)
    n = 200_000
    run_events(st, n)
    counts = np.array([st.event_counts[k.name] for k in list(EventKind)[:4]])
    p = cfg.event_probabilities()
    z = (counts - n * p) / np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(z) < 3), z


def test_mean_holding_time():
    cfg = ChurnConfig(K=2**14, N0=200, r=10**5, seed=8)
    st = init_ring(cfg)
    n0 = st.alive_count
    run_events(st, 5000)
    # no churn to speak of, so the clock is a sum of Exp(N * rate) gaps
    expect = 5000 / (n0 * cfg.rate_per_node)
    assert st.clock[0] == pytest.approx(expect, rel=3 / np.sqrt(5000))


def test_determinism():
    cfg = ChurnConfig(K=2**14, N0=200, r=20, seed=11, warmup_events=2000, measure_events=2000,
                      snapshot_interval=500, probes_per_snapshot=20)
    a = init_ring(cfg)
    b = init_ring(cfg)
    la = run_events(a, 5000, log=True)
    lb = run_events(b, 5000, log=True)
    for x, y in zip(la, lb):
        assert np.array_equal(x, y)
    sa, sb = a.snapshot(), b.snapshot()
    for x, y in zip(sa.arrays, sb.arrays):
        assert x.tobytes() == y.tobytes()
    ra, rb = run_trial(cfg), run_trial(cfg)
    assert [c.wrong.tobytes() for c in ra.censuses] == [c.wrong.tobytes() for c in rb.censuses]
    assert [p.hops.tobytes() for p in ra.probes] == [p.hops.tobytes() for p in rb.probes]


def test_no_churn_means_no_errors():
    cfg = ChurnConfig(K=2**14, N0=200, lambda_f=0.0, seed=1, warmup_events=2000, measure_events=2000)
    res = run_trial(cfg)
    s = res.summary()
    for q in ("w", "d", "f", "p_bu"):
        assert np.nansum(s.values[q]) == 0
    assert s.values["inconsistency"][0] == 0
    assert res.event_counts["JOIN"] == res.event_counts["FAILURE"] == 0


def test_broken_rings_are_counted_and_repaired():
    cfg = ChurnConfig(K=2**12, N0=200, S=1, r=4, seed=3, warmup_events=5000, measure_events=5000,
                      snapshot_interval=1000, repair_budget=10**6)
    res = run_trial(cfg)
    assert res.breakups > 0 and not res.aborted
    assert len(res.censuses) == 5


def test_repair_budget_aborts():
    cfg = ChurnConfig(K=2**12, N0=200, S=1, r=4, seed=3, warmup_events=5000, measure_events=5000,
                      snapshot_interval=1000, repair_budget=0)
    res = run_trial(cfg)
    assert res.aborted and len(res.censuses) < 5


def test_trial_config_seeds():
    cfg = ChurnConfig(seed=99)
    assert trial_config(cfg, 3, 100).seed == 103
    assert trial_config(cfg, 3).seed == 102


def test_warmup_default_scales_with_finger_relaxation():
    slow = ChurnConfig(r=2000, alpha=0.25)
    fast = ChurnConfig(r=200, alpha=0.25)
    assert slow.warmup > fast.warmup >= 10 * fast.N0
