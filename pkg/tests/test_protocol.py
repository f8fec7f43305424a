import numpy as np
import pytest
from hypothesis import given, strategies as st

from chordlab.protocol import BrokenRing, RingState


def ring(K, keys, S=3):
    return RingState.converged(K, S, keys)


def true_successor(keys, k, K):
    keys = sorted(keys)
    return next((x for x in keys if x >= k % K), keys[0])


# ---------------------------------------------------------------- join


def test_join_sets_true_first_successor():
    R = ring(16, [0, 4, 8])
    R.join(2, 0)
    assert R.node(2).successors[0] == 4
    # the predecessor is not told
    assert R.node(0).successors[0] == 4


def test_join_single_node_ring():
    R = ring(16, [0])
    R.join(8, 0)
    assert R.node(8).successors[0] == 0


def test_join_rejects_bad_contact():
    R = ring(16, [0, 4])
    with pytest.raises(ValueError):
        R.join(2, 3)
    with pytest.raises(ValueError):
        R.join(4, 0)


def test_join_initialises_fingers_on_two_node_ring():
    R = ring(16, [0, 8])
    R.join(4, 0)
    assert R.node(4).fingers == [8, 8, 8, 0]


# ---------------------------------------------------------------- fixSuccessors


def test_fix_successors_case_c():
    R = ring(16, [0, 4, 8])
    R.set_node(0, successors=[4, 8])
    R.set_node(4, predecessor=0, successors=[8, 0])
    R.fix_successors(0)
    assert R.node(0).successors == [4, 8, 0]


def test_fix_successors_case_a_prepends_and_retries():
    R = ring(16, [0, 4, 8])
    R.set_node(0, successors=[8, 0])
    R.set_node(8, predecessor=4)
    R.fix_successors(0)
    assert R.node(0).successors == [4, 8, 0]


def test_fix_successors_adopts_when_predecessor_dead():
    R = ring(16, [4, 6, 8, 12])
    R.fail(6)
    R.fix_successors(4)
    assert R.node(8).predecessor == 4
    assert R.node(4).successors == [8, 12, 4]


def test_fix_successors_case_b_considers_new_predecessor():
    R = ring(16, [0, 4, 8, 12])
    # 8 reports p = 2, which lies in (8, 4): 4 learns of a closer predecessor
    R.add(2)
    R.set_node(2, predecessor=0, successors=[4, 8, 12])
    R.set_node(8, predecessor=2)
    R.set_node(4, predecessor=0)
    R.fix_successors(4)
    assert R.node(4).predecessor == 2
    assert R.node(4).successors[0] == 8


def test_fix_successors_broken_ring():
    R = ring(16, [0, 4, 8, 12])
    R.fail(4)
    R.fail(8)
    R.fail(12)
    with pytest.raises(BrokenRing):
        R.fix_successors(0)


# ---------------------------------------------------------------- iThinkIAmYourPred


def test_i_think_dead_predecessor():
    R = ring(16, [4, 8])
    R.set_node(8, predecessor=6)
    succ, answer = R.i_think_i_am_your_pred(8, 4)
    assert answer == 4 and R.node(8).predecessor == 4
    assert succ == R.node(8).successors


def test_i_think_closer_predecessor():
    R = ring(16, [3, 5, 8])
    R.set_node(8, predecessor=3)
    _, answer = R.i_think_i_am_your_pred(8, 5)
    assert answer == 3 and R.node(8).predecessor == 5


def test_i_think_fixed_point():
    R = ring(16, [3, 5, 8])
    before = R.node(8)
    _, answer = R.i_think_i_am_your_pred(8, 5)
    assert answer == 5 and R.node(8) == before


# ---------------------------------------------------------------- firstAliveSuccessor


def test_first_alive_successor_drops_dead_heads():
    R = ring(16, [0, 4, 8])
    R.fail(4)
    R.set_node(0, successors=[4, 8])
    assert R.first_alive_successor(0) == 8
    assert R.node(0).successors == [8, None, None]


def test_first_alive_successor_no_change_is_read_only():
    R = ring(16, [0, 4, 8])
    R.fail(4)
    R.set_node(0, successors=[4, 8])
    assert R.first_alive_successor_no_change(0) == 8
    assert R.node(0).successors == [4, 8, None]


def test_first_alive_successor_alive_head():
    R = ring(16, [0, 4, 8])
    before = R.node(0).successors
    assert R.first_alive_successor(0) == 4
    assert R.first_alive_successor_no_change(0) == 4
    assert R.node(0).successors == before


def test_first_alive_successor_all_dead():
    R = ring(16, [0, 4, 8, 12])
    for k in (4, 8, 12):
        R.fail(k)
    with pytest.raises(BrokenRing):
        R.first_alive_successor_no_change(0)
    with pytest.raises(BrokenRing):
        R.first_alive_successor(0)


# ---------------------------------------------------------------- fingers


def test_init_fingers_two_node_ring():
    R = ring(16, [0, 8])
    R.add(4)
    R.set_node(4, successors=[8])
    R.init_fingers(4, 8)
    assert R.node(4).fingers == [8, 8, 8, 0]


def test_init_fingers_nil_when_nothing_qualifies():
    R = ring(16, [0, 8])
    R.set_node(8, fingers=[None] * 4)
    R.add(4)
    R.set_node(4, successors=[8])
    R.init_fingers(4, 8)
    assert R.node(4).fingers == [8, 8, 8, None]


def test_fix_fingers_repairs_dead_finger():
    R = ring(16, [0, 4, 8, 12])
    R.fail(8)
    assert R.node(0).fingers[3] == 8
    R.fix_fingers(0, 4)
    assert R.node(0).fingers[3] == 12


def test_fix_fingers_idempotent_when_correct():
    R = ring(64, [0, 5, 17, 33, 40])
    before = R.node(0).fingers
    for i in range(1, 7):
        R.fix_fingers(0, i)
    assert R.node(0).fingers == before


def test_fix_fingers_range():
    R = ring(16, [0, 8])
    with pytest.raises(IndexError):
        R.fix_fingers(0, 5)


# ---------------------------------------------------------------- lookups


def test_lookup_own_key():
    R = ring(16, [0, 4, 8, 12])
    t = R.find_successor(4, 4)
    assert (t.result, t.hops, t.timeouts) == (4, 0, 0)


def test_lookup_trace_on_four_node_ring():
    R = ring(16, [0, 4, 8, 12])
    assert R.node(0).fingers == [4, 4, 4, 8]
    t = R.find_successor(0, 9)
    assert t.result == 12 and t.hops == 2 and t.timeouts == 0 and t.cost == 2


def test_closest_preceding_finger_counts_distinct_dead():
    R = ring(64, [0, 8, 16, 32, 48])
    # fingers of 0: starts 1,2,4,8,16,32 -> 8,8,8,8,16,32
    R.fail(8)
    R.fail(16)
    R.fail(32)
    f, dead = R.closest_alive_preceding_finger(0, 40)
    assert f is None and dead == 3


def test_closest_preceding_finger_top_entry():
    R = ring(64, [0, 8, 16, 32, 48])
    assert R.closest_alive_preceding_finger(0, 40) == (32, 0)


def test_closest_preceding_succ():
    R = ring(64, [0, 8, 16, 32, 48], S=3)
    assert R.closest_alive_preceding_succ(0, 40) == 32
    R.fail(32)
    assert R.closest_alive_preceding_succ(0, 40) == 16


def test_lookup_counts_timeouts_on_dead_successor():
    R = ring(64, [0, 8, 16, 32, 48])
    R.fail(8)
    t = R.find_successor(0, 5)
    assert t.result == 16
    assert t.timeouts == 1 and t.hops == 1


def test_lookup_broken_ring():
    R = ring(16, [0, 4, 8, 12])
    for k in (4, 8, 12):
        R.fail(k)
    R.set_node(0, fingers=[None] * 4)
    t = R.find_successor(0, 6)
    assert t.broken_ring and t.result is None


def test_lookups_are_read_only():
    R = ring(64, [0, 8, 16, 32, 48])
    R.fail(16)
    before = [R.node(k) for k in R.alive_keys()]
    for k in range(64):
        R.find_successor(0, k)
    assert [R.node(k) for k in R.alive_keys()] == before


# ---------------------------------------------------------------- properties

rings = st.integers(4, 8).flatmap(
    lambda M: st.tuples(
        st.just(1 << M),
        st.sets(st.integers(0, (1 << M) - 1), min_size=1, max_size=min(64, 1 << M)),
    )
)


@given(rings)
def test_converged_lookups_are_exact(case):
    K, keys = case
    R = ring(K, keys, S=4)
    for n in keys:
        for k in range(K):
            t = R.find_successor(n, k)
            assert t.result == true_successor(keys, k, K)
            assert t.timeouts == 0


@given(rings, st.data())
def test_join_gives_correct_first_successor(case, data):
    K, keys = case
    free = sorted(set(range(K)) - keys)
    if not free:
        return
    n = data.draw(st.sampled_from(free))
    c = data.draw(st.sampled_from(sorted(keys)))
    R = ring(K, keys, S=4)
    R.join(n, c)
    assert R.node(n).successors[0] == true_successor(keys, n + 1, K)


@given(rings, st.data())
def test_stabilization_converges_from_connected_state(case, data):
    K, keys = case
    S = 4
    R = ring(K, keys, S=S)
    order = sorted(keys)
    # keep only s1, and let some nodes skip their true successor
    for i, n in enumerate(order):
        skip = len(order) > 2 and data.draw(st.booleans())
        s1 = order[(i + (2 if skip else 1)) % len(order)]
        R.set_node(n, predecessor=None if not skip else order[i - 1], successors=[s1])
    for _ in range(len(order) + S + 2):
        for n in order:
            R.fix_successors(n)
    for n in order:
        assert R.node(n).successors == R.true_successors(n)
    snapshot = [R.node(n) for n in order]
    for n in order:
        R.fix_successors(n)
    assert [R.node(n) for n in order] == snapshot


@given(st.integers(0, 2**31 - 1))
def test_churn_keeps_list_shape(seed):
    rng = np.random.default_rng(seed)
    K, S = 256, 3
    R = ring(K, rng.choice(K, 24, replace=False), S=S)
    for _ in range(200):
        alive = R.alive_keys()
        op = rng.integers(4)
        n = int(rng.choice(alive))
        try:
            if op == 0:
                free = np.setdiff1d(np.arange(K), alive)
                R.join(int(rng.choice(free)), n)
            elif op == 1 and len(alive) > 4 * S:
                R.fail(n)
            elif op == 2:
                R.fix_successors(n)
            else:
                R.fix_fingers(n, int(rng.integers(1, 9)))
        except BrokenRing:
            R.repair_successors(n)
        for m in R.alive_keys():
            node = R.node(int(m))
            assert len(node.successors) == S and len(node.fingers) == 8
            assert int(m) not in node.successors
