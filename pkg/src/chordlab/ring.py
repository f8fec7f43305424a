"""Circular key-space arithmetic.

Keys are integers in ``[0, K)`` with ``K = 2**M``. All predicates follow
the usual Chord conventions; an interval whose endpoints coincide wraps
the whole ring (the open one excludes the endpoint itself).

The ``_nb`` helpers are the numba-compiled twins used inside the
simulation kernels. They take ``mask = K - 1`` instead of ``K``.
"""
from __future__ import annotations

import numba

NIL = -1

_CLOSURES = ("()", "(]", "[)", "[]")


def check_key_space(K: int) -> int:
    """Return ``M = log2(K)``; raise if K is not a power of two >= 2."""
    if K < 2 or K & (K - 1):
        raise ValueError(f"key space size must be a power of two >= 2, got {K}")
    return K.bit_length() - 1


def distance(u: int, v: int, K: int) -> int:
    """Clockwise distance from ``v`` to ``u``, i.e. ``(u - v) mod K``."""
    return (u - v) % K


def in_interval(x: int, a: int, b: int, K: int, closure: str = "(]") -> bool:
    """True iff ``x`` lies on the clockwise arc from ``a`` to ``b``.

    ``closure`` is one of ``"()"``, ``"(]"``, ``"[)"``, ``"[]"``. When
    ``a == b`` the arc is the full circle: ``(a, a)`` is every key except
    ``a``, the other closures contain every key.
    """
    if closure not in _CLOSURES:
        raise ValueError(f"closure must be one of {_CLOSURES}, got {closure!r}")
    span = (b - a) % K or K
    if closure[0] == "(":
        off = (x - a - 1) % K + 1  # in 1..K
        lo = 1
    else:
        off = (x - a) % K  # in 0..K-1
        lo = 0
    hi = span if closure[1] == "]" else span - 1
    return lo <= off <= hi


def finger_start(n: int, i: int, K: int) -> int:
    """Start key of the i-th finger of node ``n`` (1-based), ``n + 2**(i-1)``."""
    M = check_key_space(K)
    if not 1 <= i <= M:
        raise IndexError(f"finger index {i} outside 1..{M}")
    return (n + (1 << (i - 1))) % K


@numba.njit(cache=True, inline="always")
def in_open_nb(x, a, b, mask):
    # x in (a, b); (a, a) is the ring minus a
    off = (x - a - 1) & mask
    span = ((b - a - 1) & mask) + 1
    return off + 1 < span


@numba.njit(cache=True, inline="always")
def in_half_nb(x, a, b, mask):
    # x in (a, b]; (a, a] is the whole ring
    off = (x - a - 1) & mask
    span = ((b - a - 1) & mask) + 1
    return off + 1 <= span
