"""Pure-Python rank-allocation kernels.

Reference implementation of the routines in ``_kernels.pyx``; both must give
identical results for identical inputs. Spectra arrive as one flat float64
array of cumulative energies with ``offsets[a]:offsets[a+1]`` delimiting
matrix ``a``.
"""

import numpy as np

BACKEND = "python"

TAU_TOL = 1e-9
MAX_BISECT = 64


def level_rank(flat, start, stop, tau, floor, rmax):
    """Smallest 1-based rank whose cumulative energy reaches ``tau``, clamped."""
    hi = min(stop, start + rmax)
    lo = start
    # count entries < tau in the non-decreasing slice [start, hi)
    while lo < hi:
        mid = (lo + hi) // 2
        if flat[mid] < tau:
            lo = mid + 1
        else:
            hi = mid
    r = lo - start + 1
    if r < floor:
        r = floor
    if r > rmax:
        r = rmax
    return r


def _level_cost(flat, offsets, floors, rmax, costs, tau):
    total = 0
    for a in range(len(floors)):
        total += costs[a] * level_rank(flat, offsets[a], offsets[a + 1], tau, floors[a], rmax[a])
    return total


def balanced_solve(flat, offsets, floors, rmax, costs, budget):
    """Bisection on a shared energy level followed by greedy top-up.

    Returns ``(ranks, tau, iterations)``. The caller guarantees that the
    floor ranks fit in ``budget``.
    """
    flat = [float(v) for v in flat]
    offsets = [int(v) for v in offsets]
    floors = [int(v) for v in floors]
    rmax = [int(v) for v in rmax]
    costs = [int(v) for v in costs]
    n = len(floors)
    iterations = 0
    if _level_cost(flat, offsets, floors, rmax, costs, 1.0) <= budget:
        tau = 1.0
    else:
        lo, hi = 0.0, 1.0
        while iterations < MAX_BISECT and hi - lo > TAU_TOL:
            mid = 0.5 * (lo + hi)
            if _level_cost(flat, offsets, floors, rmax, costs, mid) <= budget:
                lo = mid
            else:
                hi = mid
            iterations += 1
        tau = lo
    ranks = [level_rank(flat, offsets[a], offsets[a + 1], tau, floors[a], rmax[a]) for a in range(n)]
    used = sum(costs[a] * ranks[a] for a in range(n))
    while True:
        best = -1
        best_c = 0.0
        for a in range(n):
            if ranks[a] < rmax[a] and used + costs[a] <= budget:
                c = flat[offsets[a] + ranks[a] - 1]
                if best < 0 or c < best_c:
                    best = a
                    best_c = c
        if best < 0:
            break
        ranks[best] += 1
        used += costs[best]
    return np.asarray(ranks, dtype=np.int64), tau, iterations


def brute_force_solve(flat, offsets, floors, rmax, costs, budget):
    """Exhaustive search over rank tuples.

    Feasible tuples respect floors, ``rmax``, the budget, and the discrete
    balance rule: every matrix above its floor would fall to or below the
    sublayer's minimum retained energy if it gave up one rank. Among feasible
    tuples the largest energy sum wins; ties go to the smaller maximum rank,
    then to the lexicographically smallest tuple. Returns ``(ranks, best)``
    or ``(None, -inf)`` when nothing is feasible.
    """
    flat = [float(v) for v in flat]
    offsets = [int(v) for v in offsets]
    floors = [int(v) for v in floors]
    rmax = [int(v) for v in rmax]
    costs = [int(v) for v in costs]
    n = len(floors)
    cur = list(floors)
    best = None
    best_val = float("-inf")
    best_max = 0
    if any(f > m for f, m in zip(floors, rmax)):
        return None, best_val
    while True:
        used = 0
        for a in range(n):
            used += costs[a] * cur[a]
        if used <= budget:
            level = 2.0
            val = 0.0
            for a in range(n):
                c = flat[offsets[a] + cur[a] - 1]
                val += c
                if c < level:
                    level = c
            ok = True
            for a in range(n):
                if cur[a] > floors[a] and flat[offsets[a] + cur[a] - 2] > level:
                    ok = False
                    break
            if ok:
                top = max(cur)
                if best is None or val > best_val or (val == best_val and top < best_max):
                    best = list(cur)
                    best_val = val
                    best_max = top
        # odometer increment, last index fastest -> lexicographic order
        a = n - 1
        while a >= 0:
            cur[a] += 1
            if cur[a] <= rmax[a]:
                break
            cur[a] = floors[a]
            a -= 1
        if a < 0:
            break
    if best is None:
        return None, best_val
    return np.asarray(best, dtype=np.int64), best_val
