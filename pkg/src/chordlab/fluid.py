"""Steady-state fluid-model predictions for Chord under churn.

All results are functions of ``K``, ``N``, ``S``, ``r`` and ``alpha`` via
:class:`TheoryParams`. Probabilities that come from leading-order
expansions can exceed one far outside their range of validity; they are
returned unclamped alongside a boolean validity mask so that callers
decide what to do with them.

The lookup-cost recursion is evaluated exactly for every distance
``1..K-1``. The geometric kernel ``bc(i, x)`` makes every convolution in
the recursion a window of the running sum ``G(x) = C_x + rho * G(x-1)``,
so each distance costs O(M) work regardless of ``K``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numba
import numpy as np
from scipy.special import gammaln

from .ring import check_key_space


@dataclass(frozen=True)
class TheoryParams:
    K: int = 2**20
    N: int = 1000
    S: int = 6
    r: float = 500.0
    alpha: float = 0.5

    def __post_init__(self):
        check_key_space(self.K)
        if not 0 < self.N < self.K:
            raise ValueError(f"need 0 < N < K, got N={self.N}, K={self.K}")
        if not self.r > 0:
            raise ValueError(f"r must be > 0, got {self.r}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.S < 1:
            raise ValueError(f"S must be >= 1, got {self.S}")

    @property
    def M(self) -> int:
        return check_key_space(self.K)

    @property
    def rho(self) -> float:
        return (self.K - self.N) / self.K


# ---------------------------------------------------------------- intervals


def interval_pmf(x, p: TheoryParams):
    """Probability that the gap to the next node is exactly ``x`` keys."""
    x = np.asarray(x)
    if np.any(x < 1):
        raise ValueError("interval length must be >= 1")
    out = p.rho ** (x - 1.0) * (1.0 - p.rho)
    return float(out) if out.ndim == 0 else out


def a_prob(x, rho: float):
    """Probability of at least one node among ``x`` consecutive keys."""
    return -np.expm1(np.asarray(x, dtype=float) * math.log(rho))


def first_node_probs(x: int, p: TheoryParams):
    """Returns ``(a(x), b, bc)`` with ``b[i]``, ``bc[i]`` for ``i = 0..x-1``.

    ``b[i]`` is the probability that the first node after ``u`` sits at
    ``u + i``; ``bc`` is the same conditioned on the window being occupied.
    """
    if x < 0:
        raise ValueError("interval length must be >= 0")
    rho = p.rho
    a = float(a_prob(x, rho))
    i = np.arange(x, dtype=float)
    b = rho**i * (1.0 - rho)
    bc = b / a if x > 0 else b
    return a, b, bc


def p_share(j: int, k: int, p: TheoryParams) -> float:
    """Probability that a node and at least ``j`` immediate predecessors share finger ``k``.

    The ``j``-th predecessor lies ``X`` keys back, ``X`` a sum of ``j``
    geometric gaps; the fingers coincide when ``X < 2**(k-1)`` and the
    ``X`` keys between the two finger starts are all empty.
    """
    if j < 1:
        raise ValueError("j must be >= 1")
    if not 1 <= k <= p.M:
        raise ValueError(f"finger index {k} outside 1..{p.M}")
    rho = p.rho
    L = 1 << (k - 1)
    if j == 1:
        return rho / (1 + rho) * -math.expm1((2**k - 2) * math.log(rho))
    if L - 1 < j:
        return 0.0
    q2 = 1.0 - rho * rho
    cap = math.ceil((j + 40 + 10 * math.sqrt(j)) / q2) + j
    X = np.arange(j, min(L - 1, cap) + 1, dtype=float)
    log_terms = (
        gammaln(X) - gammaln(j) - gammaln(X - j + 1)
        + j * math.log1p(-rho)
        + (2 * X - j) * math.log(rho)
    )
    return float(np.exp(log_terms).sum())


def p_join(k: int, p: TheoryParams) -> float:
    """Probability that a joinee copies its successor's k-th finger as its own k-th."""
    if k < 3:
        raise ValueError("p_join is defined for k >= 3")
    rho = p.rho
    L = 2 ** (k - 2)
    lr = math.log(rho)
    pk = -math.expm1((L - 2) * lr)
    tail = (1 - rho) * rho * (L - 2) * math.exp((L - 3) * lr) if L > 2 else 0.0
    return rho * pk + (1 - rho) * pk - tail


# ---------------------------------------------------------------- successors


@dataclass
class SuccessorPredictions:
    w: np.ndarray  # index 1..S, index 0 unused
    d: np.ndarray
    d_leading: np.ndarray
    inconsistency: float
    valid: np.ndarray


def successor_predictions(p: TheoryParams) -> SuccessorPredictions:
    ar = p.alpha * p.r
    k = np.arange(p.S + 1, dtype=float)
    w1 = 2.0 / (3.0 + ar)
    w = k * (k + 1) / ar
    w[1] = w1
    d1 = w1 / 2
    d = k * d1
    d_leading = k / ar
    w[0] = d[0] = d_leading[0] = np.nan
    valid = (k <= math.sqrt(p.r)) & (w <= 1)
    valid[1] = True
    valid[0] = False
    return SuccessorPredictions(w=w, d=d, d_leading=d_leading, inconsistency=w1 - d1, valid=valid)


def breakup_probability(n: int, p: TheoryParams) -> float:
    """Probability that a node's first ``n`` successors are all dead."""
    if not 1 <= n <= p.S:
        raise ValueError(f"n must lie in 1..S={p.S}")
    return math.factorial(n + 1) / (2.0 * (p.alpha * p.r) ** n)


# ---------------------------------------------------------------- fingers


@dataclass
class FingerPredictions:
    f: np.ndarray  # index 1..M, exact quadratic root; nan where invalid
    f_leading: np.ndarray
    p_rep: np.ndarray
    p_join: np.ndarray
    valid: np.ndarray

    @property
    def plateau(self) -> float:
        return float(self.f[-1])


def finger_predictions(p: TheoryParams, terms: int = 3) -> FingerPredictions:
    """Dead-finger fractions from the steady state of the finger master equation.

    ``p_rep(k)`` keeps the first ``terms`` sharing probabilities. The
    joinee copy probability is zero for fingers 1 and 2, whose starts fall
    inside the gap to the joinee's successor.
    """
    M = p.M
    R = p.r * (1 - p.alpha) / M
    f = np.full(M + 1, np.nan)
    f_lead = np.full(M + 1, np.nan)
    p_rep = np.full(M + 1, np.nan)
    pj = np.full(M + 1, np.nan)
    valid = np.zeros(M + 1, dtype=bool)
    for k in range(1, M + 1):
        P = sum(p_share(j, k, p) for j in range(1, terms + 1))
        q = p_join(k, p) if k >= 3 else 0.0
        B = 2 * P + 2 - q + R
        disc = B * B - 4 * (1 + P) ** 2
        p_rep[k], pj[k] = P, q
        f_lead[k] = (1 + P) * M / ((1 - p.alpha) * p.r)
        if disc >= 0:
            f[k] = (B - math.sqrt(disc)) / (2 * (1 + P))
            valid[k] = 0 <= f[k] <= 1
    return FingerPredictions(f=f, f_leading=f_lead, p_rep=p_rep, p_join=pj, valid=valid)


# ---------------------------------------------------------------- lookups


def h_probabilities(k: int, p: TheoryParams, f) -> np.ndarray:
    """``h[i]``, i = 1..k: probability that a dead k-th finger pushes the lookup to finger k-i.

    ``f`` is indexed from 1 (``f[0]`` ignored). ``h[k]`` is the probability
    that no lower finger is usable at all.
    """
    return _h_row(k, p.rho, np.asarray(f, dtype=float))


@numba.njit(cache=True)
def _h_row(k, rho, f):
    h = np.zeros(k + 1)
    xi = 1 << (k - 1)
    carry = 1.0
    lr = math.log(rho)
    for i in range(1, k):
        a = -math.expm1((xi >> i) * lr)
        h[i] = a * (1 - f[k - i]) * carry
        carry *= 1 - a + a * f[k - i]
    h[k] = carry
    return h


def adjacent_cost(d) -> float:
    """Expected cost of reaching the adjacent key: one hop plus a timeout per dead successor tried."""
    d = np.asarray(d, dtype=float)
    S = d.shape[0] - 1
    total, alive_prefix = 0.0, 1.0
    for j in range(S):
        total += (j + 1) * alive_prefix * (1 - d[j + 1])
        alive_prefix *= d[j + 1]
    return total


@numba.njit(cache=True)
def _lookup_costs(K, rho, f, c1):
    M = f.shape[0] - 1
    lr = math.log(rho)
    h = np.zeros((M + 1, M + 1))
    for k in range(1, M + 1):
        h[k, : k + 1] = _h_row(k, rho, f)
    C = np.zeros(K)
    G = np.zeros(K)
    C[1] = c1
    G[1] = c1
    for t in range(2, K):
        k = 1
        while (1 << k) < t:
            k += 1
        xi = 1 << (k - 1)
        m = t - xi
        rho_m = math.exp(m * lr)
        am = 1.0 - rho_m
        fk = f[k]
        cost = rho_m * C[xi] + (1 - fk) * (am + (1 - rho) * G[m])
        if fk > 0:
            acc = 0.0
            for i in range(1, k):
                L = xi >> i
                D = xi - L + m
                rho_L = math.exp(L * lr)
                window = G[D] - rho_L * G[D - L]
                acc += h[k, i] * (i + (1 - rho) / (1 - rho_L) * window)
            cost += fk * am * (1 + acc)
        C[t] = cost
        G[t] = cost + rho * G[t - 1]
    return C


def lookup_costs(p: TheoryParams, f=None, d=None) -> np.ndarray:
    """Expected cost ``C[t]`` of reaching the key ``t`` steps ahead, for t = 0..K-1.

    ``f`` (length M+1) and ``d`` (length S+1) are indexed from 1; omitted
    vectors mean no churn. The successor-list fallback taken when every
    lower finger is dead is left out, as in the recursion it approximates.
    """
    f = np.zeros(p.M + 1) if f is None else np.nan_to_num(np.asarray(f, dtype=float))
    d = np.zeros(p.S + 1) if d is None else np.nan_to_num(np.asarray(d, dtype=float))
    if f.shape[0] != p.M + 1 or d.shape[0] != p.S + 1:
        raise ValueError("f must have length M+1 and d length S+1 (index 0 unused)")
    return _lookup_costs(p.K, p.rho, f, adjacent_cost(d))


def lookup_cost(t: int, p: TheoryParams, f=None, d=None) -> float:
    if not 1 <= t < p.K:
        raise ValueError(f"distance must lie in 1..K-1, got {t}")
    return float(lookup_costs(p, f, d)[t])


@dataclass
class LookupPrediction:
    mean: float          # L from the full recursion
    zero_churn: float    # A
    fit: float           # A * (1 + f + 3 f^2)
    f: float             # plateau dead-finger fraction used by the fit


def mean_lookup(p: TheoryParams, f=None, d=None) -> LookupPrediction:
    C = lookup_costs(p, f, d)
    A = float(lookup_costs(p).sum() / p.K)
    fp = 0.0 if f is None else float(np.asarray(f)[-1])
    return LookupPrediction(
        mean=float(C.sum() / p.K), zero_churn=A, fit=A * (1 + fp + 3 * fp**2), f=fp
    )


# ---------------------------------------------------------------- bundle


@dataclass
class PredictionSet:
    """Theory values for one parameter point, indexed from 1 like the census.

    Probabilities are clamped to [0, 1]; ``valid`` holds a boolean mask per
    quantity that is False wherever the leading-order expression left its
    range (unclamped values are kept in ``raw``).
    """

    params: TheoryParams
    w: np.ndarray
    d: np.ndarray
    d_leading: np.ndarray
    f: np.ndarray
    f_leading: np.ndarray
    inconsistency: float
    p_bu: np.ndarray
    lookup: Optional[LookupPrediction] = None
    c: Optional[np.ndarray] = None
    valid: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def lookup_mean(self) -> float:
        return self.lookup.mean if self.lookup else math.nan

    def value(self, quantity: str, index: int = 0) -> float:
        if quantity in ("w", "d", "d_leading", "f", "f_leading", "p_bu"):
            return float(getattr(self, quantity)[index])
        if quantity == "inconsistency":
            return self.inconsistency
        if quantity == "lookup":
            return self.lookup_mean
        if quantity == "lookup_zero_churn":
            return self.lookup.zero_churn if self.lookup else math.nan
        if quantity == "lookup_fit":
            return self.lookup.fit if self.lookup else math.nan
        raise KeyError(quantity)


def _clamp(name, values, mask, raw, valid):
    values = np.asarray(values, dtype=float)
    raw[name] = values
    inside = (values >= 0) & (values <= 1)
    valid[name] = np.asarray(mask, dtype=bool) & inside
    return np.clip(values, 0.0, 1.0)


def predict(p: TheoryParams, with_lookup: bool = True, keep_costs: bool = False) -> PredictionSet:
    """Every steady-state prediction for one parameter point."""
    sp = successor_predictions(p)
    fp = finger_predictions(p)
    p_bu = np.full(p.S + 1, np.nan)
    for n in range(1, p.S + 1):
        p_bu[n] = breakup_probability(n, p)
    lookup = c = None
    if with_lookup:
        lookup = mean_lookup(p, fp.f, sp.d)
        if keep_costs:
            c = lookup_costs(p, fp.f, sp.d)
    raw, valid = {}, {}
    s_mask = np.arange(p.S + 1) > 0
    w = _clamp("w", sp.w, sp.valid, raw, valid)
    d = _clamp("d", sp.d, s_mask, raw, valid)
    d_lead = _clamp("d_leading", sp.d_leading, s_mask, raw, valid)
    f = _clamp("f", fp.f, fp.valid, raw, valid)
    f_lead = _clamp("f_leading", fp.f_leading, np.arange(p.M + 1) > 0, raw, valid)
    p_bu = _clamp("p_bu", p_bu, s_mask, raw, valid)
    return PredictionSet(
        params=p, w=w, d=d, d_leading=d_lead, f=f, f_leading=f_lead,
        inconsistency=sp.inconsistency, p_bu=p_bu, lookup=lookup, c=c,
        valid=valid, raw=raw,
    )
