"""Binomial intervals and rank correlation for campaign reports.

Wilson is the reported default; Clopper-Pearson is kept alongside as the
exact construction so the two can be cross-checked on small n.
"""
import math

import numpy as np
from scipy.stats import beta

Z95 = 1.959963984540054  # two-sided 95% normal quantile


def wilson_interval(successes: int, n: int, z: float = Z95) -> tuple:
    """Score interval for a binomial proportion; endpoints inside [0, 1]."""
    if n <= 0 or not 0 <= successes <= n:
        raise ValueError("need 0 <= successes <= n with n > 0")
    ph = successes / n
    den = 1.0 + z * z / n
    mid = (ph + z * z / (2 * n)) / den
    half = z * math.sqrt(ph * (1.0 - ph) / n + z * z / (4 * n * n)) / den
    # the endpoints are exact at the boundary cases; avoid fp shortfall
    lo = 0.0 if successes == 0 else max(0.0, mid - half)
    hi = 1.0 if successes == n else min(1.0, mid + half)
    return lo, hi


def clopper_pearson(successes: int, n: int, alpha: float = 0.05) -> tuple:
    """Exact binomial interval from beta quantiles."""
    if n <= 0 or not 0 <= successes <= n:
        raise ValueError("need 0 <= successes <= n with n > 0")
    lo = 0.0 if successes == 0 else float(
        beta.ppf(alpha / 2.0, successes, n - successes + 1))
    hi = 1.0 if successes == n else float(
        beta.ppf(1.0 - alpha / 2.0, successes + 1, n - successes))
    return lo, hi


def diff_interval(s1: int, n1: int, s2: int, n2: int, z: float = Z95) -> tuple:
    """Newcombe score interval for p1 - p2, built from Wilson endpoints."""
    p1, p2 = s1 / n1, s2 / n2
    l1, u1 = wilson_interval(s1, n1, z)
    l2, u2 = wilson_interval(s2, n2, z)
    d = p1 - p2
    return (d - math.sqrt((p1 - l1) ** 2 + (u2 - p2) ** 2),
            d + math.sqrt((u1 - p1) ** 2 + (p2 - l2) ** 2))


def _ranks(xs: np.ndarray) -> np.ndarray:
    """Average ranks (1-based); ties share the mean of their rank block."""
    order = np.argsort(xs, kind="stable")
    ranks = np.empty(len(xs), dtype=np.float64)
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    """Rank correlation with average-rank tie handling."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
        raise ValueError("need two equal-length 1-d samples, n >= 2")
    rx, ry = _ranks(xs), _ranks(ys)
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        return float("nan")  # a constant curve has no rank order
    return float(np.mean((rx - rx.mean()) * (ry - ry.mean())) / (sx * sy))
