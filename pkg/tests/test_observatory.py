import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chordlab.engine import ChurnConfig, init_ring, run_events, run_trial
from chordlab.observatory import (
    GroundTruth,
    Snapshot,
    TrialSummary,
    aggregate,
    census,
    pooled_counts,
    probe_batch,
    probe_consistency,
    summarize_trial,
)
from chordlab.protocol import RingState


def test_ground_truth():
    g = GroundTruth([12, 0, 4, 8], 16)
    assert g.true_successor(5) == 8
    assert g.true_successor(8) == 8
    assert g.true_successor(13) == 0
    assert g.true_kth_successor(4, 1) == 8
    assert g.true_kth_successor(12, 2) == 4
    with pytest.raises(KeyError):
        g.true_kth_successor(5, 1)


def test_converged_census_is_clean():
    R = RingState.converged(256, 3, range(0, 256, 16))
    c = census(Snapshot.of(R))
    assert c.w.sum() == c.d.sum() == c.f.sum() == c.p_bu.sum() == 0


def test_hand_built_wrong_successor():
    R = RingState.converged(16, 2, [0, 4, 8, 12])
    R.set_node(0, successors=[8, 12])
    c = census(Snapshot.of(R))
    assert c.w[0] == 0.25 and c.d[0] == 0


def test_nil_counts_as_dead_and_wrong():
    R = RingState.converged(16, 2, [0, 4, 8, 12])
    R.set_node(0, successors=[None, None], fingers=[4, None, 8, 8])
    c = census(Snapshot.of(R))
    assert c.w[0] == c.d[0] == c.p_bu[1] == 0.25
    assert c.f[1] == 0.25 and c.f[0] == 0


def test_tiny_ring_excludes_self_successors():
    R = RingState.converged(16, 3, [0, 8])
    c = census(Snapshot.of(R))
    assert list(c.eligible) == [2, 0, 0]


def test_census_needs_two_nodes():
    with pytest.raises(ValueError):
        census(Snapshot.of(RingState.converged(16, 2, [3])))


def test_snapshot_copy_is_isolated():
    R = RingState.converged(64, 2, [0, 10, 20, 30])
    snap = Snapshot.of(R)
    R.fail(10)
    assert snap.n_alive == 4 and 10 in snap.arrays.keys


def test_probes_on_converged_ring():
    st_ = init_ring(ChurnConfig(K=2**12, N0=100, seed=1))
    b = probe_batch(st_.snapshot(), np.random.default_rng(0), 500)
    assert b.consistent.all() and (b.timeouts == 0).all()
    assert np.array_equal(b.cost, b.hops)
    snap = st_.snapshot()
    for t in b.traces()[:20]:
        assert probe_consistency(snap, t)


def test_probe_consistency_flags_stale_result():
    R = RingState.converged(16, 2, [0, 4, 8, 12])
    R.add(6)
    snap = Snapshot.of(R)
    t = R.find_successor(0, 5)
    assert t.result == 8 and not probe_consistency(snap, t)


@settings(max_examples=15)
@given(st.integers(0, 10**6), st.sampled_from([5.0, 20.0, 80.0]))
def test_census_invariants_under_churn(seed, r):
    cfg = ChurnConfig(K=2**12, N0=150, S=4, r=r, seed=seed)
    state = init_ring(cfg)
    run_events(state, 3000)
    c = census(state.snapshot())
    assert np.all(c.dead <= c.wrong)
    assert np.all(np.diff(c.breakup) <= 0)
    assert c.breakup[0] == c.dead[0]


def _trial(seed, **kw):
    cfg = ChurnConfig(K=2**12, N0=100, r=50, seed=seed, warmup_events=1000, measure_events=2000,
                      snapshot_interval=500, probes_per_snapshot=50, **kw)
    return summarize_trial(run_trial(cfg))


def test_aggregate_identical_trials():
    a = _trial(1)
    recs = aggregate([a, a])
    assert all(r.stderr == 0 or np.isnan(r.stderr) for r in recs)
    w1 = next(r for r in recs if r.quantity == "w" and r.index == 1)
    assert w1.mean == a.values["w"][1] and w1.trials == 2 and w1.N == 100


def test_aggregate_stderr():
    s = [_trial(i) for i in range(4)]
    recs = {(r.quantity, r.index): r for r in aggregate(s)}
    vals = np.array([x.values["w"][1] for x in s])
    assert recs["w", 1].stderr == pytest.approx(vals.std(ddof=1) / 2)
    assert pooled_counts(s, "nodes") == sum(x.counts["nodes"] for x in s)


def test_aggregate_rejects_bad_input():
    a = _trial(1)
    with pytest.raises(ValueError):
        aggregate([a])
    b = TrialSummary(params={**a.params, "r": 1.0}, values=a.values)
    with pytest.raises(ValueError):
        aggregate([a, b])
