"""Independent reference computations used to check the implementation.

Nothing here imports from ``encoms``; each function recomputes a quantity
by the most direct route available (enumeration, closed form, linear scan).
"""

from __future__ import annotations

import functools
import itertools
import math
from fractions import Fraction


@functools.lru_cache(maxsize=None)
def enumerated_tail_counts(n: int, m: int) -> tuple[dict, int]:
    """For each attainable U: how many labelings give U at most / at least that value.

    Every way of assigning n of the ranks 1..n+m to the first group is listed once.
    """
    values = sorted(sum(combo) - n * (n + 1) / 2 for combo in itertools.combinations(range(1, n + m + 1), n))
    tails = {u: (sum(v <= u for v in values), sum(v >= u for v in values)) for u in set(values)}
    return tails, len(values)


def brute_force_u_pvalue(a, b) -> tuple[float, float]:
    """U statistic of ``a`` and its exact two-sided p by enumerating every labeling.

    The pooled values are tie-free, so the null distribution of U depends only
    on which positions of the sorted pool belong to group ``a``.
    """
    n, m = len(a), len(b)
    pooled = sorted(list(a) + list(b))
    rank = {v: i + 1 for i, v in enumerate(pooled)}
    u_obs = sum(rank[v] for v in a) - n * (n + 1) / 2
    tails, total = enumerated_tail_counts(n, m)
    le, ge = tails[u_obs]
    p = min(Fraction(1), Fraction(2 * min(le, ge), total))
    return u_obs, float(p)


def pairwise_u(a, b) -> float:
    """U by counting pairs, ties worth one half."""
    u = 0.0
    for x in a:
        for y in b:
            u += 1.0 if x > y else 0.5 if x == y else 0.0
    return u


def trapezoid_by_hand(points) -> float:
    """Sum of (p_i + p_{i+1}) / 2 * dt over (t_seconds, watts) pairs."""
    total = 0.0
    for (t0, p0), (t1, p1) in zip(points, points[1:]):
        total += (p0 + p1) / 2.0 * (t1 - t0)
    return total


def sine_energy(t0: float, t1: float, base: float = 10.0, amp: float = 5.0, period: float = 50.0) -> float:
    """Closed-form integral of base + amp*sin(2*pi*t/period) over [t0, t1]."""
    w = 2 * math.pi / period
    return base * (t1 - t0) - amp / w * (math.cos(w * t1) - math.cos(w * t0))


def pearson_by_hand(x, y) -> float:
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def glob_match(name: str, pattern: str) -> bool:
    """Recursive matcher for ``*`` and ``?`` wildcards (no character classes)."""
    if not pattern:
        return not name
    head = pattern[0]
    if head == "*":
        return any(glob_match(name[i:], pattern[1:]) for i in range(len(name) + 1))
    if not name:
        return False
    if head == "?" or head == name[0]:
        return glob_match(name[1:], pattern[1:])
    return False


def linear_scan(points, from_ms: int, to_ms: int, time_of=lambda p: p[0]):
    return [p for p in points if from_ms <= time_of(p) < to_ms]


def running_max_normalized(values):
    out, best = [], 0.0
    for v in values:
        best = max(best, v)
        out.append(0.0 if best == 0 else v / best)
    return out
