"""Poisson churn engine.

Joins, failures, successor stabilizations and finger stabilizations are
drawn one at a time from a single exponential clock whose total rate is
``N(t) * (lambda_j + lambda_f + lambda_s)``; the steady-state condition
``lambda_j = lambda_f`` is built in. Each event touches the ring through the
protocol kernels and nothing else.

Broken rings do not stop a trial: the node whose successor list ran out is
counted in ``breakups`` and has its list re-seeded from ground truth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional

import numba
import numpy as np

from . import observatory
from .protocol import (
    NIL,
    RUNAWAY,
    RingState,
    add_node_nb,
    converge_nb,
    fix_fingers_nb,
    fix_successors_nb,
    init_fingers_nb,
    is_alive_nb,
    join_nb,
    remove_node_nb,
    repair_successors_nb,
)
from .ring import check_key_space


class EventKind(IntEnum):
    JOIN = 0
    FAILURE = 1
    SUCCESSOR_STABILIZATION = 2
    FINGER_STABILIZATION = 3
    NOOP = 4


# layout of SimState.stats
_N_KINDS = 5
BREAKUPS = 5
RUNAWAYS = 6
_N_STATS = 7


@dataclass(frozen=True)
class ChurnConfig:
    """Parameters of one simulated trial.

    ``lambda_s = r * lambda_f``. With ``lambda_f = 0`` there is no churn at
    all and time is counted in stabilization periods (per-node rate 1).
    Leaving ``warmup_events`` unset picks five relaxation times of the
    slowest pointer class, the fingers.
    """

    K: int = 2**20
    N0: int = 1000
    S: int = 6
    r: float = 500.0
    alpha: float = 0.5
    lambda_f: float = 1.0
    seed: int = 0
    warmup_events: Optional[int] = None
    measure_events: Optional[int] = None
    snapshot_interval: Optional[int] = None
    probes_per_snapshot: int = 10
    repair_budget: Optional[int] = None

    def __post_init__(self):
        check_key_space(self.K)
        if not 2 <= self.N0 < self.K:
            raise ValueError(f"N0 must satisfy 2 <= N0 < K, got N0={self.N0}, K={self.K}")
        if self.S < 1:
            raise ValueError(f"S must be >= 1, got {self.S}")
        if not self.r > 0:
            raise ValueError(f"r must be > 0, got {self.r}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.lambda_f < 0:
            raise ValueError(f"lambda_f must be >= 0, got {self.lambda_f}")
        for name in ("warmup_events", "measure_events", "snapshot_interval", "repair_budget"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")
        if self.probes_per_snapshot < 0:
            raise ValueError("probes_per_snapshot must be >= 0")

    @property
    def M(self) -> int:
        return check_key_space(self.K)

    @property
    def lambda_j(self) -> float:
        return self.lambda_f

    @property
    def lambda_s(self) -> float:
        return self.r * self.lambda_f if self.lambda_f > 0 else 1.0

    def event_probabilities(self) -> np.ndarray:
        """Probabilities of join, failure, successor and finger stabilization."""
        rates = np.array([
            self.lambda_j,
            self.lambda_f,
            self.alpha * self.lambda_s,
            (1.0 - self.alpha) * self.lambda_s,
        ])
        return rates / rates.sum()

    @property
    def rate_per_node(self) -> float:
        return self.lambda_j + self.lambda_f + self.lambda_s

    @property
    def warmup(self) -> int:
        if self.warmup_events is not None:
            return self.warmup_events
        if self.lambda_f == 0:
            return 10 * self.N0
        # dead-finger relaxation time, in events per node
        tau = (2 + self.r) / ((1 - self.alpha) * self.r / self.M + 2)
        return max(10, math.ceil(5 * tau)) * self.N0

    @property
    def interval(self) -> int:
        return self.snapshot_interval if self.snapshot_interval is not None else self.N0

    @property
    def measure(self) -> int:
        return self.measure_events if self.measure_events is not None else 50 * self.N0

    @property
    def budget(self) -> int:
        return self.repair_budget if self.repair_budget is not None else 10 * self.N0


@dataclass(frozen=True)
class Event:
    kind: EventKind
    subject: int
    contact: int = NIL
    finger: int = 0  # 1-based, finger stabilizations only


# ---------------------------------------------------------------- kernels


@numba.njit(cache=True)
def _draw_event_nb(st, rng, cum, rate_per_node):
    """Returns (kind, subject, contact, finger0, dt)."""
    n = st.count[0]
    K = st.slot_of.shape[0]
    M = st.fing.shape[1]
    dt = rng.exponential(1.0 / (n * rate_per_node))
    u = rng.random()
    kind = 0
    while kind < 3 and u >= cum[kind]:
        kind += 1
    if kind == 0:
        if n >= K:
            return 4, NIL, NIL, 0, dt
        key = rng.integers(0, K)
        while st.slot_of[key] >= 0:
            key = rng.integers(0, K)
        contact = st.keys[rng.integers(0, n)]
        return 0, key, contact, 0, dt
    subject = st.keys[rng.integers(0, n)]
    if kind == 1:
        if n <= 2:
            return 4, subject, NIL, 0, dt
        return 1, subject, NIL, 0, dt
    if kind == 2:
        return 2, subject, NIL, 0, dt
    return 3, subject, NIL, rng.integers(0, M), dt


@numba.njit(cache=True)
def _note_broken(st, stats, code):
    if code == NIL:
        return
    if code == RUNAWAY:
        stats[RUNAWAYS] += 1
        return
    stats[BREAKUPS] += 1
    repair_successors_nb(st, code)


@numba.njit(cache=True)
def _apply_event_nb(st, kind, subject, contact, finger0, stats):
    stats[kind] += 1
    if kind == 0:
        code = join_nb(st, subject, contact)
        if code != NIL:
            _note_broken(st, stats, code)
            if code == RUNAWAY:
                return
            if not is_alive_nb(st, subject):
                _note_broken(st, stats, join_nb(st, subject, contact))
            else:
                slot = st.slot_of[subject]
                init_fingers_nb(st, slot, st.succ[slot, 0])
    elif kind == 1:
        remove_node_nb(st, subject)
    elif kind == 2:
        _note_broken(st, stats, fix_successors_nb(st, st.slot_of[subject]))
    elif kind == 3:
        _note_broken(st, stats, fix_fingers_nb(st, st.slot_of[subject], finger0))


@numba.njit(cache=True)
def _run_events_nb(st, rng, n_events, cum, rate_per_node, stats, clock, log_kind, log_subject, log_pop):
    """Run up to ``n_events`` events; stops early when the slot arrays are full.

    Returns the number of events executed. Logs are filled when non-empty.
    """
    cap = st.keys.shape[0]
    logging = log_kind.shape[0] > 0
    for e in range(n_events):
        if st.count[0] >= cap:
            return e
        kind, subject, contact, finger0, dt = _draw_event_nb(st, rng, cum, rate_per_node)
        clock[0] += dt
        _apply_event_nb(st, kind, subject, contact, finger0, stats)
        if logging:
            log_kind[e] = kind
            log_subject[e] = subject
            log_pop[e] = st.count[0]
    return n_events


# ---------------------------------------------------------------- state


@dataclass
class SimState:
    cfg: ChurnConfig
    ring: RingState
    rng: np.random.Generator
    clock: np.ndarray = field(default_factory=lambda: np.zeros(1))
    stats: np.ndarray = field(default_factory=lambda: np.zeros(_N_STATS, dtype=np.int64))
    events: int = 0

    @property
    def alive_count(self) -> int:
        return len(self.ring)

    @property
    def breakup_events(self) -> int:
        return int(self.stats[BREAKUPS])

    @property
    def event_counts(self) -> dict:
        return {EventKind(i).name: int(self.stats[i]) for i in range(_N_KINDS)}

    def snapshot(self, copy: bool = True) -> "observatory.Snapshot":
        return observatory.Snapshot.of(self.ring, clock=float(self.clock[0]), copy=copy)


def init_ring(cfg: ChurnConfig) -> SimState:
    """Populate every key independently with probability N0/K and converge all pointers."""
    rng = np.random.default_rng(cfg.seed)
    while True:
        keys = np.flatnonzero(rng.random(cfg.K) < cfg.N0 / cfg.K)
        if keys.size >= 2:
            break
    ring = RingState(cfg.K, cfg.S, capacity=2 * keys.size + 64)
    a = ring.arrays
    n = keys.size
    a.keys[:n] = keys
    a.slot_of[keys] = np.arange(n, dtype=np.int32)
    a.count[0] = n
    converge_nb(a)
    return SimState(cfg=cfg, ring=ring, rng=rng)


def _cum(cfg: ChurnConfig) -> np.ndarray:
    return np.cumsum(cfg.event_probabilities())


def next_event(state: SimState) -> tuple:
    """Draw the next event and the time until it, without applying it."""
    kind, subject, contact, finger0, dt = _draw_event_nb(
        state.ring.arrays, state.rng, _cum(state.cfg), state.cfg.rate_per_node
    )
    finger = int(finger0) + 1 if kind == EventKind.FINGER_STABILIZATION else 0
    return Event(EventKind(int(kind)), int(subject), int(contact), finger), float(dt)


def apply_event(state: SimState, event: Event, dt: float = 0.0) -> None:
    state.ring.ensure_capacity(1)
    finger0 = max(event.finger - 1, 0)
    _apply_event_nb(state.ring.arrays, int(event.kind), event.subject, event.contact, finger0, state.stats)
    state.clock[0] += dt
    state.events += 1


_EMPTY = np.zeros(0, dtype=np.int64)


def run_events(state: SimState, n_events: int, log: bool = False):
    """Advance ``n_events`` events. With ``log`` returns (kinds, subjects, population) arrays."""
    if log:
        kinds = np.empty(n_events, dtype=np.int64)
        subjects = np.empty(n_events, dtype=np.int64)
        pop = np.empty(n_events, dtype=np.int64)
    cum = _cum(state.cfg)
    done = 0
    while done < n_events:
        state.ring.ensure_capacity(max(64, len(state.ring) // 4))
        if log:
            lk, ls, lp = kinds[done:], subjects[done:], pop[done:]
        else:
            lk = ls = lp = _EMPTY
        done += _run_events_nb(
            state.ring.arrays, state.rng, n_events - done, cum, state.cfg.rate_per_node,
            state.stats, state.clock, lk, ls, lp,
        )
    state.events += n_events
    if log:
        return kinds, subjects, pop
    return None


@dataclass
class TrialResult:
    cfg: ChurnConfig
    censuses: list
    probes: list  # one ProbeBatch per snapshot
    breakups: int
    event_counts: dict
    mean_population: float
    aborted: bool = False
    snapshots: Optional[list] = None

    def summary(self) -> "observatory.TrialSummary":
        return observatory.summarize_trial(self)


def run_trial(cfg: ChurnConfig, keep_snapshots: bool = False) -> TrialResult:
    """Warm up, then alternate ``cfg.interval`` events with a census and probe batch.

    Probes and the census read the live arrays between events, so they see
    exactly the snapshot at that instant and never perturb it.
    """
    state = init_ring(cfg)
    if cfg.lambda_f > 0 or cfg.warmup_events:
        run_events(state, cfg.warmup)
    censuses, probes, snaps, pops = [], [], [], []
    n_snap = cfg.measure // cfg.interval if cfg.interval else 0
    aborted = False
    for _ in range(max(n_snap, 1)):
        if n_snap and cfg.lambda_f > 0:
            run_events(state, cfg.interval)
        if state.stats[RUNAWAYS] or state.stats[BREAKUPS] > cfg.budget:
            aborted = True
            break
        snap = state.snapshot(copy=keep_snapshots)
        censuses.append(observatory.census(snap))
        probes.append(observatory.probe_batch(snap, state.rng, cfg.probes_per_snapshot))
        pops.append(state.alive_count)
        if keep_snapshots:
            snaps.append(snap)
    return TrialResult(
        cfg=cfg,
        censuses=censuses,
        probes=probes,
        breakups=state.breakup_events,
        event_counts=state.event_counts,
        mean_population=float(np.mean(pops)) if pops else float("nan"),
        aborted=aborted,
        snapshots=snaps if keep_snapshots else None,
    )


def trial_config(cfg: ChurnConfig, trial: int, seed_base: Optional[int] = None) -> ChurnConfig:
    """Config of trial number ``trial``: seed = seed_base + trial."""
    base = cfg.seed if seed_base is None else seed_base
    return replace(cfg, seed=base + trial)
