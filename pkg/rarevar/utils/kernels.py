"""Compiled kernels for per-observation tail sums."""
import math

import numpy as np
from numba import njit, prange

NEG_INF = -np.inf

# Terms this far (in log units) below the running total are dropped
TAIL_CUTOFF = 40.0


@njit
def _logaddexp(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit
def _log_tails(k0, n, a, b):
    """
    Log tail sums of a beta-binomial pmf relative to pmf(k0).

    Returns (log sum_{k<k0} pmf(k)/pmf(k0), log sum_{k>k0} pmf(k)/pmf(k0)).
    The walk uses the exact ratio of consecutive terms, so no absolute pmf
    value is ever formed. Early stopping relies on log-concavity, which holds
    when both shapes are at least one.
    """
    if n <= 0:
        return NEG_INF, NEG_INF
    can_stop = a >= 1.0 and b >= 1.0

    log_up = NEG_INF
    lt = 0.0
    k = k0
    while k < n:
        step = (math.log(n - k) + math.log(k + a)
                - math.log(k + 1.0) - math.log(n - k - 1.0 + b))
        lt += step
        k += 1
        log_up = _logaddexp(log_up, lt)
        if can_stop and step < 0.0:
            # geometric bound on everything not yet summed
            remaining = lt - math.log1p(-math.exp(step))
            if remaining < _logaddexp(0.0, log_up) - TAIL_CUTOFF:
                break

    log_lo = NEG_INF
    lt = 0.0
    k = k0
    while k > 0:
        step = (math.log(k) + math.log(n - k + b)
                - math.log(n - k + 1.0) - math.log(k - 1.0 + a))
        lt += step
        k -= 1
        log_lo = _logaddexp(log_lo, lt)
        if can_stop and step < 0.0:
            remaining = lt - math.log1p(-math.exp(step))
            total = _logaddexp(_logaddexp(0.0, log_up), log_lo)
            if remaining < total - TAIL_CUTOFF:
                break

    return log_lo, log_up


@njit(parallel=True)
def betabinom_log_tails(x, n, a, b):
    m = x.shape[0]
    log_lo = np.empty(m)
    log_up = np.empty(m)
    for e in prange(m):
        lo, up = _log_tails(x[e], n[e], a[e], b[e])
        log_lo[e] = lo
        log_up[e] = up
    return log_lo, log_up
