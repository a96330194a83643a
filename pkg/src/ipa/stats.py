"""Interval estimates and rank correlation for campaign reports."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from statistics import NormalDist

__all__ = ["wilson_interval", "rank", "spearman", "SpearmanResult", "EXACT_MAX_N"]

EXACT_MAX_N = 8


def wilson_interval(successes: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("need at least one trial")
    if not 0 <= successes <= n:
        raise ValueError("successes must lie in 0..n")
    z = NormalDist().inv_cdf(0.5 + level / 2)
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo, hi = max(0.0, centre - half), min(1.0, centre + half)
    # guard against rounding pushing the bound past the point estimate
    return min(lo, p), max(hi, p)


def rank(xs) -> list[float]:
    """1-based ranks with ties sharing their average rank."""
    order = sorted(range(len(xs)), key=lambda i: xs[i])
    ranks = [0.0] * len(xs)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _pearson(a, b) -> float | None:
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    da = [x - ma for x in a]
    db = [y - mb for y in b]
    sa = math.sqrt(sum(x * x for x in da))
    sb = math.sqrt(sum(y * y for y in db))
    if sa == 0 or sb == 0:
        return None
    r = sum(x * y for x, y in zip(da, db)) / (sa * sb)
    return max(-1.0, min(1.0, r))


def _rho(rx, ry) -> float | None:
    n = len(rx)
    if len(set(rx)) == n and len(set(ry)) == n:
        d2 = sum((a - b) ** 2 for a, b in zip(rx, ry))
        return 1 - 6 * d2 / (n * (n * n - 1))
    return _pearson(rx, ry)


@dataclass(frozen=True)
class SpearmanResult:
    rho: float | None          # None when either series is constant
    p_value: float | None
    significant: bool | None   # at alpha
    exact: bool


def spearman(xs, ys, alpha: float = 0.05) -> SpearmanResult:
    """Spearman's rho with a two-sided p-value.

    For up to ``EXACT_MAX_N`` points the p-value comes from enumerating every
    permutation of ``ys``; larger samples use scipy's t approximation.
    """
    xs, ys = list(xs), list(ys)
    if len(xs) != len(ys):
        raise ValueError("series differ in length")
    n = len(xs)
    if n < 3:
        raise ValueError("need at least three points")
    rx, ry = rank(xs), rank(ys)
    rho = _rho(rx, ry)
    if rho is None:
        return SpearmanResult(None, None, None, n <= EXACT_MAX_N)
    if n <= EXACT_MAX_N:
        hits = total = 0
        for perm in itertools.permutations(ry):
            r = _rho(rx, perm)
            total += 1
            if r is not None and abs(r) >= abs(rho) - 1e-12:
                hits += 1
        p = hits / total
        return SpearmanResult(rho, p, p < alpha, True)
    from scipy.stats import spearmanr

    p = float(spearmanr(xs, ys).pvalue)
    return SpearmanResult(rho, p, p < alpha, False)
