"""Chord join, stabilization and lookup, node by node.

Every node's pointers live in a row of a few dense arrays (see
:class:`RingArrays`). Pointers are stored as *keys*, never as slots, so a
pointer to a departed node is simply a key that no longer maps to a slot;
``is_alive`` is a single lookup into ``slot_of``. The same compiled kernels
run the unit-scale traces in the tests and the million-event churn loops in
:mod:`chordlab.engine`.

:class:`RingState` is the Python-side handle. It owns the arrays, plays the
role of the liveness oracle, and exposes each protocol step as a method
taking and returning plain keys.
"""
from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numba
import numpy as np

from .ring import NIL, check_key_space, in_half_nb, in_open_nb

# Sentinel returned in place of a broken-node key when a kernel runs away.
RUNAWAY = -2

_MAX_STEPS = 1 << 22

RingArrays = namedtuple("RingArrays", ["slot_of", "keys", "pred", "succ", "fing", "count"])
RingArrays.__doc__ = """Array storage of a ring population.

slot_of: int32[K], slot of the live node at each key or -1.
keys:    int64[cap], key held by each slot (first ``count[0]`` valid).
pred:    int64[cap], predecessor key or NIL.
succ:    int64[cap, S], successor list, NIL-padded.
fing:    int64[cap, M], finger nodes (entry i is finger i+1).
count:   int64[1], number of live nodes.
"""


class BrokenRing(RuntimeError):
    """A node found every entry of its successor list dead or nil."""

    def __init__(self, node: int):
        super().__init__(f"successor list of node {node} exhausted")
        self.node = node


@dataclass
class NodeState:
    key: int
    predecessor: Optional[int]
    successors: list = field(default_factory=list)
    fingers: list = field(default_factory=list)
    alive: bool = True


@dataclass
class LookupTrace:
    """Outcome of one lookup. Cost counts hops and timeouts alike."""

    source: int
    target: int
    result: Optional[int] = None
    hops: int = 0
    timeouts: int = 0
    broken_ring: bool = False
    broken_node: Optional[int] = None

    @property
    def cost(self) -> int:
        return self.hops + self.timeouts


def allocate(K: int, S: int, capacity: int) -> RingArrays:
    M = check_key_space(K)
    return RingArrays(
        slot_of=np.full(K, -1, dtype=np.int32),
        keys=np.full(capacity, NIL, dtype=np.int64),
        pred=np.full(capacity, NIL, dtype=np.int64),
        succ=np.full((capacity, S), NIL, dtype=np.int64),
        fing=np.full((capacity, M), NIL, dtype=np.int64),
        count=np.zeros(1, dtype=np.int64),
    )


# ---------------------------------------------------------------- kernels


@numba.njit(cache=True)
def is_alive_nb(st, k):
    return k >= 0 and st.slot_of[k] >= 0


@numba.njit(cache=True)
def add_node_nb(st, key):
    slot = st.count[0]
    if slot >= st.keys.shape[0]:
        return -1
    st.count[0] = slot + 1
    st.keys[slot] = key
    st.slot_of[key] = slot
    st.pred[slot] = NIL
    st.succ[slot, :] = NIL
    st.fing[slot, :] = NIL
    return slot


@numba.njit(cache=True)
def remove_node_nb(st, key):
    slot = st.slot_of[key]
    last = st.count[0] - 1
    if slot != last:
        moved = st.keys[last]
        st.keys[slot] = moved
        st.pred[slot] = st.pred[last]
        st.succ[slot, :] = st.succ[last, :]
        st.fing[slot, :] = st.fing[last, :]
        st.slot_of[moved] = slot
    st.slot_of[key] = -1
    st.keys[last] = NIL
    st.count[0] = last


@numba.njit(cache=True)
def first_alive_successor_nb(st, slot):
    """Drop dead heads of the list (NIL-padding the tail); NIL if exhausted."""
    S = st.succ.shape[1]
    while True:
        s1 = st.succ[slot, 0]
        if s1 == NIL:
            return NIL
        if is_alive_nb(st, s1):
            return s1
        for i in range(S - 1):
            st.succ[slot, i] = st.succ[slot, i + 1]
        st.succ[slot, S - 1] = NIL


@numba.njit(cache=True)
def first_alive_index_nb(st, slot):
    """Read-only scan; index of the first alive entry, or -1 on a nil/exhausted list."""
    S = st.succ.shape[1]
    for i in range(S):
        s = st.succ[slot, i]
        if s == NIL:
            return -1
        if is_alive_nb(st, s):
            return i
    return -1


@numba.njit(cache=True)
def i_think_i_am_your_pred_nb(st, slot, x):
    p = st.pred[slot]
    if p == NIL or not is_alive_nb(st, p):
        st.pred[slot] = x
        return x
    mask = st.slot_of.shape[0] - 1
    if in_open_nb(x, p, st.keys[slot], mask):
        st.pred[slot] = x
        return p
    return p


@numba.njit(cache=True)
def consider_a_new_pred_nb(st, slot, x):
    p = st.pred[slot]
    mask = st.slot_of.shape[0] - 1
    if p == NIL or not is_alive_nb(st, p) or in_open_nb(x, p, st.keys[slot], mask):
        st.pred[slot] = x


@numba.njit(cache=True)
def prepend_nb(st, slot, y):
    S = st.succ.shape[1]
    for i in range(S - 1, 0, -1):
        st.succ[slot, i] = st.succ[slot, i - 1]
    st.succ[slot, 0] = y


@numba.njit(cache=True)
def reconcile_nb(st, slot, ys):
    S = st.succ.shape[1]
    for i in range(1, S):
        st.succ[slot, i] = ys[i - 1]


@numba.njit(cache=True)
def fix_successors_nb(st, slot):
    """One successor stabilization. Returns NIL, or the key of the broken node."""
    mask = st.slot_of.shape[0] - 1
    n = st.keys[slot]
    for _ in range(_MAX_STEPS):
        y = first_alive_successor_nb(st, slot)
        if y == NIL:
            return n
        yslot = st.slot_of[y]
        ys = st.succ[yslot, :].copy()
        yp = i_think_i_am_your_pred_nb(st, yslot, n)
        if in_open_nb(yp, n, y, mask):
            # Case A: somebody sits between us and y
            prepend_nb(st, slot, yp)
            continue
        if in_open_nb(yp, y, n, mask):
            # Case B
            consider_a_new_pred_nb(st, slot, yp)
        reconcile_nb(st, slot, ys)
        return NIL
    return RUNAWAY


@numba.njit(cache=True)
def _note_dead(probed, nprobed, k):
    # returns the new probed count; a key already in probed costs nothing
    for j in range(nprobed):
        if probed[j] == k:
            return nprobed
    probed[nprobed] = k
    return nprobed + 1


@numba.njit(cache=True)
def closest_alive_preceding_finger_nb(st, slot, k, probed, nprobed):
    """Highest alive finger strictly inside (n, k); dead ones probed are noted."""
    mask = st.slot_of.shape[0] - 1
    n = st.keys[slot]
    M = st.fing.shape[1]
    for i in range(M - 1, -1, -1):
        f = st.fing[slot, i]
        if f != NIL and in_open_nb(f, n, k, mask):
            if is_alive_nb(st, f):
                return f, nprobed
            nprobed = _note_dead(probed, nprobed, f)
    return NIL, nprobed


@numba.njit(cache=True)
def closest_alive_preceding_succ_nb(st, slot, k, probed, nprobed):
    mask = st.slot_of.shape[0] - 1
    n = st.keys[slot]
    S = st.succ.shape[1]
    for i in range(S - 1, -1, -1):
        s = st.succ[slot, i]
        if s != NIL and in_open_nb(s, n, k, mask):
            if is_alive_nb(st, s):
                return s, nprobed
            nprobed = _note_dead(probed, nprobed, s)
    return NIL, nprobed


@numba.njit(cache=True)
def _first_alive_probing(st, slot, probed, nprobed):
    idx = first_alive_index_nb(st, slot)
    upto = idx if idx >= 0 else st.succ.shape[1]
    for i in range(upto):
        s = st.succ[slot, i]
        if s == NIL:
            break
        nprobed = _note_dead(probed, nprobed, s)
    y = st.succ[slot, idx] if idx >= 0 else NIL
    return y, nprobed


@numba.njit(cache=True)
def lookup_nb(st, start, k):
    """Iterative findSuccessor(k) issued at node ``start``.

    Returns ``(result, hops, timeouts, broken)`` with ``broken`` the key of
    the node whose successor list ran out (NIL when the lookup succeeded).
    Lookups never modify any pointer.
    """
    mask = st.slot_of.shape[0] - 1
    S = st.succ.shape[1]
    M = st.fing.shape[1]
    probed = np.empty(M + S, dtype=np.int64)
    cur = start
    hops = 0
    timeouts = 0
    for _ in range(_MAX_STEPS):
        if k == cur:
            return cur, hops, timeouts, NIL
        slot = st.slot_of[cur]
        nprobed = 0
        s1 = st.succ[slot, 0]
        if s1 != NIL and in_half_nb(k, cur, s1, mask):
            y, nprobed = _first_alive_probing(st, slot, probed, nprobed)
            timeouts += nprobed
            if y == NIL:
                return NIL, hops, timeouts, cur
            return y, hops + 1, timeouts, NIL
        nxt, nprobed = closest_alive_preceding_finger_nb(st, slot, k, probed, nprobed)
        if nxt == NIL:
            y, nprobed = _first_alive_probing(st, slot, probed, nprobed)
            if y == NIL:
                return NIL, hops, timeouts + nprobed, cur
            if in_half_nb(k, cur, y, mask):
                return y, hops + 1, timeouts + nprobed, NIL
            nxt, nprobed = closest_alive_preceding_succ_nb(st, slot, k, probed, nprobed)
            if nxt == NIL:
                nxt = y
        timeouts += nprobed
        hops += 1
        cur = nxt
    return NIL, hops, timeouts, RUNAWAY


@numba.njit(cache=True)
def init_fingers_nb(st, slot, s1):
    mask = st.slot_of.shape[0] - 1
    M = st.fing.shape[1]
    n = st.keys[slot]
    copied = st.fing[st.slot_of[s1], :].copy()
    for i in range(M):
        start = (n + (1 << i)) & mask
        if in_half_nb(start, n, s1, mask):
            st.fing[slot, i] = s1
            continue
        # localSuccessor over the successor's table
        res = NIL
        for j in range(M):
            fj = copied[j]
            if fj != NIL and in_half_nb(start, n, fj, mask):
                res = fj
                break
        st.fing[slot, i] = res


@numba.njit(cache=True)
def fix_fingers_nb(st, slot, i):
    """Refresh finger ``i`` (0-based). Returns NIL or the broken node's key."""
    mask = st.slot_of.shape[0] - 1
    n = st.keys[slot]
    start = (n + (1 << i)) & mask
    res, _, _, broken = lookup_nb(st, n, start)
    if broken != NIL:
        return broken
    st.fing[st.slot_of[n], i] = res
    return NIL


@numba.njit(cache=True)
def join_nb(st, n, c):
    """Node ``n`` joins through contact ``c``. Returns NIL, a broken key, or RUNAWAY.

    A join that cannot find its successor leaves the ring untouched.
    """
    s1, _, _, broken = lookup_nb(st, c, n)
    if broken != NIL:
        return broken
    slot = add_node_nb(st, n)
    if slot < 0:
        return RUNAWAY
    st.succ[slot, 0] = s1
    broken = fix_successors_nb(st, slot)
    if broken != NIL:
        return broken
    init_fingers_nb(st, slot, st.succ[slot, 0])
    return NIL


@numba.njit(cache=True)
def true_successors_nb(st, key, out):
    """Fill ``out`` with the first len(out) live keys strictly after ``key``."""
    K = st.slot_of.shape[0]
    mask = K - 1
    n = out.shape[0]
    j = 0
    x = key
    if st.count[0] == 0:
        out[:] = NIL
        return
    while j < n:
        x = (x + 1) & mask
        if st.slot_of[x] >= 0:
            out[j] = x
            j += 1


@numba.njit(cache=True)
def repair_successors_nb(st, key):
    slot = st.slot_of[key]
    row = np.empty(st.succ.shape[1], dtype=np.int64)
    true_successors_nb(st, key, row)
    st.succ[slot, :] = row


@numba.njit(cache=True)
def converge_nb(st):
    """Set every pointer of every live node to ground truth."""
    K = st.slot_of.shape[0]
    mask = K - 1
    S = st.succ.shape[1]
    M = st.fing.shape[1]
    n = st.count[0]
    ordered = np.sort(st.keys[:n])
    # nxt[x]: first live key strictly after x, wrapping to the lowest one
    nxt = np.empty(K, dtype=np.int64)
    first = ordered[0]
    cur = first
    for x in range(K - 1, -1, -1):
        nxt[x] = cur
        if st.slot_of[x] >= 0:
            cur = x
    for idx in range(n):
        key = ordered[idx]
        slot = st.slot_of[key]
        st.pred[slot] = ordered[(idx - 1) % n]
        for i in range(S):
            st.succ[slot, i] = ordered[(idx + 1 + i) % n]
        for i in range(M):
            start = (key + (1 << i)) & mask
            if st.slot_of[start] >= 0:
                st.fing[slot, i] = start
            else:
                st.fing[slot, i] = nxt[start]


# ---------------------------------------------------------------- python API


def _opt(k) -> Optional[int]:
    k = int(k)
    return None if k == NIL else k


class RingState:
    """A ring population plus its liveness oracle.

    Nodes that fail are removed outright; any key not currently held by a
    live node reads as dead. Methods named after protocol steps take the
    acting node's key.
    """

    def __init__(self, K: int, S: int, capacity: int = 64):
        self.K = K
        self.M = check_key_space(K)
        self.S = S
        self.arrays = allocate(K, S, capacity)

    @classmethod
    def converged(cls, K: int, S: int, keys: Iterable[int], capacity: Optional[int] = None):
        keys = sorted(set(int(k) for k in keys))
        ring = cls(K, S, capacity or max(2 * len(keys), 16))
        for k in keys:
            ring.add(k)
        if keys:
            converge_nb(ring.arrays)
        return ring

    # population ----------------------------------------------------------
    def __len__(self) -> int:
        return int(self.arrays.count[0])

    def __contains__(self, key: int) -> bool:
        return self.is_alive(key)

    def is_alive(self, key: Optional[int]) -> bool:
        return key is not None and key != NIL and self.arrays.slot_of[key] >= 0

    def alive_keys(self) -> np.ndarray:
        return np.sort(self.arrays.keys[: len(self)])

    def ensure_capacity(self, extra: int) -> None:
        cap = self.arrays.keys.shape[0]
        need = len(self) + extra
        if need <= cap:
            return
        new = allocate(self.K, self.S, max(need, 2 * cap))
        n = len(self)
        new.slot_of[:] = self.arrays.slot_of
        new.keys[:n] = self.arrays.keys[:n]
        new.pred[:n] = self.arrays.pred[:n]
        new.succ[:n] = self.arrays.succ[:n]
        new.fing[:n] = self.arrays.fing[:n]
        new.count[0] = n
        self.arrays = new

    def add(self, key: int) -> None:
        if self.is_alive(key):
            raise ValueError(f"key {key} already populated")
        self.ensure_capacity(1)
        add_node_nb(self.arrays, key)

    def fail(self, key: int) -> None:
        """Fail-stop: the node vanishes without telling anyone."""
        if not self.is_alive(key):
            raise KeyError(key)
        remove_node_nb(self.arrays, key)

    def converge(self) -> None:
        if len(self):
            converge_nb(self.arrays)

    # node access ---------------------------------------------------------
    def _slot(self, key: int) -> int:
        slot = int(self.arrays.slot_of[key])
        if slot < 0:
            raise KeyError(f"no live node at key {key}")
        return slot

    def node(self, key: int) -> NodeState:
        a, slot = self.arrays, self._slot(key)
        return NodeState(
            key=key,
            predecessor=_opt(a.pred[slot]),
            successors=[_opt(s) for s in a.succ[slot]],
            fingers=[_opt(f) for f in a.fing[slot]],
            alive=True,
        )

    def set_node(self, key: int, *, predecessor=..., successors=None, fingers=None) -> None:
        a, slot = self.arrays, self._slot(key)
        if predecessor is not ...:
            a.pred[slot] = NIL if predecessor is None else predecessor
        if successors is not None:
            a.succ[slot] = _padded(successors, self.S)
        if fingers is not None:
            a.fing[slot] = _padded(fingers, self.M)

    def finger_start(self, key: int, i: int) -> int:
        if not 1 <= i <= self.M:
            raise IndexError(f"finger index {i} outside 1..{self.M}")
        return (key + (1 << (i - 1))) % self.K

    def true_successors(self, key: int, count: Optional[int] = None) -> list:
        out = np.empty(count or self.S, dtype=np.int64)
        true_successors_nb(self.arrays, key, out)
        return [int(x) for x in out]

    # protocol steps -------------------------------------------------------
    def join(self, n: int, contact: int) -> None:
        if not self.is_alive(contact):
            raise ValueError(f"contact {contact} is not alive")
        if self.is_alive(n):
            raise ValueError(f"key {n} already populated")
        self.ensure_capacity(1)
        _raise_if_broken(join_nb(self.arrays, n, contact))

    def fix_successors(self, n: int) -> None:
        _raise_if_broken(fix_successors_nb(self.arrays, self._slot(n)))

    def i_think_i_am_your_pred(self, n: int, x: int) -> tuple:
        """``x`` tells ``n`` it is its predecessor. Returns (n's successor list, answer)."""
        slot = self._slot(n)
        succ = [_opt(s) for s in self.arrays.succ[slot]]
        return succ, int(i_think_i_am_your_pred_nb(self.arrays, slot, x))

    def first_alive_successor(self, n: int) -> int:
        y = int(first_alive_successor_nb(self.arrays, self._slot(n)))
        if y == NIL:
            raise BrokenRing(n)
        return y

    def first_alive_successor_no_change(self, n: int) -> int:
        slot = self._slot(n)
        idx = int(first_alive_index_nb(self.arrays, slot))
        if idx < 0:
            raise BrokenRing(n)
        return int(self.arrays.succ[slot, idx])

    def init_fingers(self, n: int, s1: int) -> None:
        init_fingers_nb(self.arrays, self._slot(n), s1)

    def fix_fingers(self, n: int, i: int) -> None:
        """Refresh finger ``i`` (1-based) of node ``n`` with a lookup."""
        if not 1 <= i <= self.M:
            raise IndexError(f"finger index {i} outside 1..{self.M}")
        _raise_if_broken(fix_fingers_nb(self.arrays, self._slot(n), i - 1))

    def closest_alive_preceding_finger(self, n: int, k: int) -> tuple:
        """Returns (finger or None, number of distinct dead fingers probed)."""
        probed = np.empty(self.M + self.S, dtype=np.int64)
        f, nprobed = closest_alive_preceding_finger_nb(self.arrays, self._slot(n), k, probed, 0)
        return _opt(f), int(nprobed)

    def closest_alive_preceding_succ(self, n: int, k: int) -> Optional[int]:
        probed = np.empty(self.M + self.S, dtype=np.int64)
        s, _ = closest_alive_preceding_succ_nb(self.arrays, self._slot(n), k, probed, 0)
        return _opt(s)

    def find_successor(self, n: int, k: int) -> LookupTrace:
        """Read-only lookup of key ``k`` started at node ``n``."""
        self._slot(n)
        res, hops, timeouts, broken = lookup_nb(self.arrays, n, k % self.K)
        trace = LookupTrace(source=n, target=k, hops=int(hops), timeouts=int(timeouts))
        if broken != NIL:
            trace.broken_ring = True
            trace.broken_node = int(broken) if broken >= 0 else None
        else:
            trace.result = int(res)
        return trace

    def repair_successors(self, n: int) -> None:
        """Re-seed ``n``'s successor list from ground truth."""
        repair_successors_nb(self.arrays, n)


def _padded(values: Sequence, length: int) -> np.ndarray:
    vals = [NIL if v is None else int(v) for v in values]
    if len(vals) > length:
        raise ValueError(f"expected at most {length} entries, got {len(vals)}")
    return np.array(vals + [NIL] * (length - len(vals)), dtype=np.int64)


def _raise_if_broken(code: int) -> None:
    code = int(code)
    if code == RUNAWAY:
        raise RuntimeError("protocol step exceeded its step budget")
    if code != NIL:
        raise BrokenRing(code)
