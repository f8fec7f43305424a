"""Measurement side: pointer census, lookup probes, cross-trial aggregation.

Everything here reads a :class:`Snapshot` and never writes to it. Nil
pointers count as dead (and therefore wrong) everywhere.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np

from .protocol import NIL, LookupTrace, RingArrays, RingState, lookup_nb


@dataclass
class Snapshot:
    """A frozen (or, with ``copy=False``, borrowed) view of a ring population."""

    arrays: RingArrays
    K: int
    S: int
    M: int
    clock: float = 0.0

    @classmethod
    def of(cls, ring: RingState, clock: float = 0.0, copy: bool = True) -> "Snapshot":
        a = ring.arrays
        if copy:
            n = int(a.count[0])
            a = RingArrays(
                slot_of=a.slot_of.copy(),
                keys=a.keys[:n].copy(),
                pred=a.pred[:n].copy(),
                succ=a.succ[:n].copy(),
                fing=a.fing[:n].copy(),
                count=a.count.copy(),
            )
        return cls(arrays=a, K=ring.K, S=ring.S, M=ring.M, clock=clock)

    @property
    def n_alive(self) -> int:
        return int(self.arrays.count[0])

    def ground_truth(self) -> "GroundTruth":
        return GroundTruth(self.arrays.keys[: self.n_alive], self.K)


class GroundTruth:
    """True ring order of a snapshot's live keys."""

    def __init__(self, keys, K: int):
        self.keys = np.sort(np.asarray(keys, dtype=np.int64))
        self.K = K
        self._list = self.keys.tolist()

    def true_successor(self, k: int) -> int:
        """First live key at or after ``k``, wrapping around the ring."""
        i = bisect.bisect_left(self._list, k % self.K)
        return self._list[i % len(self._list)]

    def true_kth_successor(self, n: int, k: int) -> int:
        """The k-th live key strictly after live key ``n``."""
        i = bisect.bisect_left(self._list, n)
        if i == len(self._list) or self._list[i] != n:
            raise KeyError(f"{n} is not a live key")
        return self._list[(i + k) % len(self._list)]


@dataclass
class PointerCensus:
    """Raw counts from one snapshot; fractions are derived properties.

    ``eligible[k]`` excludes nodes whose true (k+1)-th successor would be
    themselves, which only happens on rings with at most S nodes.
    """

    n_nodes: int
    eligible: np.ndarray
    wrong: np.ndarray
    dead: np.ndarray
    finger_dead: np.ndarray
    breakup: np.ndarray

    @property
    def w(self) -> np.ndarray:
        return _ratio(self.wrong, self.eligible)

    @property
    def d(self) -> np.ndarray:
        return _ratio(self.dead, self.eligible)

    @property
    def f(self) -> np.ndarray:
        return self.finger_dead / self.n_nodes

    @property
    def p_bu(self) -> np.ndarray:
        return self.breakup / self.n_nodes


def _ratio(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.full(num.shape, np.nan)
    np.divide(num, den, out=out, where=den > 0)
    return out


@numba.njit(cache=True)
def _census_nb(st):
    n = st.count[0]
    S = st.succ.shape[1]
    M = st.fing.shape[1]
    ordered = np.sort(st.keys[:n])
    eligible = np.zeros(S, dtype=np.int64)
    wrong = np.zeros(S, dtype=np.int64)
    dead = np.zeros(S, dtype=np.int64)
    fdead = np.zeros(M, dtype=np.int64)
    bu = np.zeros(S, dtype=np.int64)
    for idx in range(n):
        key = ordered[idx]
        slot = st.slot_of[key]
        run_dead = True
        for k in range(S):
            s = st.succ[slot, k]
            is_dead = s == NIL or st.slot_of[s] < 0
            if k + 1 < n:
                eligible[k] += 1
                if is_dead:
                    dead[k] += 1
                    wrong[k] += 1
                elif s != ordered[(idx + 1 + k) % n]:
                    wrong[k] += 1
            run_dead = run_dead and is_dead
            if run_dead:
                bu[k] += 1
        for i in range(M):
            f = st.fing[slot, i]
            if f == NIL or st.slot_of[f] < 0:
                fdead[i] += 1
    return n, eligible, wrong, dead, fdead, bu


def census(snapshot: Snapshot) -> PointerCensus:
    """Count wrong and dead successors, dead fingers and dead successor runs."""
    if snapshot.n_alive < 2:
        raise ValueError("census needs at least two live nodes")
    n, eligible, wrong, dead, fdead, bu = _census_nb(snapshot.arrays)
    return PointerCensus(int(n), eligible, wrong, dead, fdead, bu)


@dataclass
class ProbeBatch:
    """Column arrays of read-only lookup probes against one snapshot."""

    source: np.ndarray
    target: np.ndarray
    result: np.ndarray
    hops: np.ndarray
    timeouts: np.ndarray
    broken: np.ndarray
    consistent: np.ndarray

    def __len__(self) -> int:
        return self.source.shape[0]

    @property
    def cost(self) -> np.ndarray:
        return self.hops + self.timeouts

    def traces(self) -> list:
        out = []
        for i in range(len(self)):
            t = LookupTrace(int(self.source[i]), int(self.target[i]),
                            hops=int(self.hops[i]), timeouts=int(self.timeouts[i]))
            if self.broken[i]:
                t.broken_ring = True
            else:
                t.result = int(self.result[i])
            out.append(t)
        return out


@numba.njit(cache=True)
def _true_successor_nb(ordered, k):
    i = np.searchsorted(ordered, k)
    if i == ordered.shape[0]:
        i = 0
    return ordered[i]


@numba.njit(cache=True)
def _probe_nb(st, rng, n_probes):
    n = st.count[0]
    K = st.slot_of.shape[0]
    ordered = np.sort(st.keys[:n])
    src = np.empty(n_probes, dtype=np.int64)
    tgt = np.empty(n_probes, dtype=np.int64)
    res = np.empty(n_probes, dtype=np.int64)
    hops = np.empty(n_probes, dtype=np.int64)
    tos = np.empty(n_probes, dtype=np.int64)
    broken = np.zeros(n_probes, dtype=np.bool_)
    ok = np.zeros(n_probes, dtype=np.bool_)
    for p in range(n_probes):
        s = st.keys[rng.integers(0, n)]
        k = rng.integers(0, K)
        r, h, t, b = lookup_nb(st, s, k)
        src[p] = s
        tgt[p] = k
        res[p] = r
        hops[p] = h
        tos[p] = t
        if b != NIL:
            broken[p] = True
        else:
            ok[p] = r == _true_successor_nb(ordered, k)
    return src, tgt, res, hops, tos, broken, ok


def probe_batch(snapshot: Snapshot, rng: np.random.Generator, n_probes: int) -> ProbeBatch:
    """Lookups from uniformly random live nodes to uniformly random keys."""
    return ProbeBatch(*_probe_nb(snapshot.arrays, rng, int(n_probes)))


def probe_consistency(snapshot: Snapshot, trace: LookupTrace, target: Optional[int] = None) -> bool:
    if trace.result is None:
        raise ValueError("trace has no result (broken ring)")
    target = trace.target if target is None else target
    return trace.result == snapshot.ground_truth().true_successor(target)


# ---------------------------------------------------------------- aggregation


@dataclass
class TrialSummary:
    """Per-trial estimates, pooled over the trial's snapshots.

    ``values`` maps a quantity name to an array indexed from 1 (index 0
    unused for indexed quantities; scalars sit at index 0). ``counts`` keeps
    the pooled numerators needed for event-count criteria.
    """

    params: dict
    values: dict
    counts: dict = field(default_factory=dict)
    aborted: bool = False


INDEXED = ("w", "d", "f", "p_bu")
SCALARS = ("inconsistency", "lookup", "lookup_hops", "lookup_timeouts", "population")


def summarize_trial(result) -> TrialSummary:
    cfg = result.cfg
    cs = result.censuses
    elig = sum(c.eligible for c in cs)
    nodes = sum(c.n_nodes for c in cs)
    wrong = sum(c.wrong for c in cs)
    dead = sum(c.dead for c in cs)
    fdead = sum(c.finger_dead for c in cs)
    bu = sum(c.breakup for c in cs)
    pad = lambda a: np.concatenate([[np.nan], np.asarray(a, dtype=float)])
    values = {
        "w": pad(_ratio(wrong, elig)),
        "d": pad(_ratio(dead, elig)),
        "f": pad(fdead / nodes),
        "p_bu": pad(bu / nodes),
    }
    probes = [p for p in result.probes if len(p)]
    if probes:
        ok = np.concatenate([p.consistent for p in probes])
        br = np.concatenate([p.broken for p in probes])
        hops = np.concatenate([p.hops for p in probes])[~br]
        tos = np.concatenate([p.timeouts for p in probes])[~br]
        values["inconsistency"] = np.array([1.0 - ok[~br].mean()]) if (~br).any() else np.array([np.nan])
        values["lookup"] = np.array([float((hops + tos).mean())])
        values["lookup_hops"] = np.array([float(hops.mean())])
        values["lookup_timeouts"] = np.array([float(tos.mean())])
        n_probes = int((~br).sum())
        n_incons = int((~ok[~br]).sum())
    else:
        n_probes = n_incons = 0
    values["population"] = np.array([result.mean_population])
    counts = {
        "nodes": int(nodes),
        "breakup": np.asarray(bu, dtype=np.int64),
        "dead": np.asarray(dead, dtype=np.int64),
        "probes": n_probes,
        "inconsistent": n_incons,
        "breakup_events": int(result.breakups),
    }
    params = {"K": cfg.K, "N": cfg.N0, "S": cfg.S, "r": cfg.r, "alpha": cfg.alpha}
    return TrialSummary(params=params, values=values, counts=counts, aborted=result.aborted)


@dataclass
class Record:
    quantity: str
    index: int
    K: int
    N: int
    S: int
    r: float
    alpha: float
    mean: float
    stderr: float
    trials: int


def aggregate(summaries: Sequence[TrialSummary]) -> list:
    """Unweighted mean and standard error across trials, one record per quantity and index."""
    if len(summaries) < 2:
        raise ValueError("aggregate needs at least two trials")
    params = summaries[0].params
    for s in summaries[1:]:
        if s.params != params:
            raise ValueError(f"trial parameters differ: {s.params} vs {params}")
    records = []
    for q in summaries[0].values:
        stack = np.vstack([s.values[q] for s in summaries])
        indices = range(1, stack.shape[1]) if q in INDEXED else range(stack.shape[1])
        for i in indices:
            col = stack[:, i]
            col = col[~np.isnan(col)]
            if col.size == 0:
                mean, se = math.nan, math.nan
            else:
                mean = float(col.mean())
                se = float(col.std(ddof=1) / math.sqrt(col.size)) if col.size > 1 else math.nan
            records.append(Record(q, i, params["K"], params["N"], params["S"],
                                  params["r"], params["alpha"], mean, se, int(col.size)))
    return records


def pooled_counts(summaries: Sequence[TrialSummary], name: str):
    """Sum a raw count across trials (e.g. ``"breakup"`` for pooled P_bu events)."""
    return sum(s.counts[name] for s in summaries)
