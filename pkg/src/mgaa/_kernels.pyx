# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled rank-allocation kernels. Semantics mirror ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t

cnp.import_array()

BACKEND = "cython"

cdef double TAU_TOL = 1e-9
cdef int MAX_BISECT = 64


cdef inline int64_t _level_rank(const double[::1] flat, int64_t start, int64_t stop, double tau,
                             int64_t floor, int64_t rmax) noexcept nogil:
    cdef int64_t hi = stop if stop < start + rmax else start + rmax
    cdef int64_t lo = start
    cdef int64_t mid, r
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


def level_rank(flat, int64_t start, int64_t stop, double tau, int64_t floor, int64_t rmax):
    cdef const double[::1] f = np.ascontiguousarray(flat, dtype=np.float64)
    return _level_rank(f, start, stop, tau, floor, rmax)


cdef int64_t _level_cost(const double[::1] flat, const int64_t[::1] offsets, const int64_t[::1] floors,
                      const int64_t[::1] rmax, const int64_t[::1] costs, double tau) noexcept nogil:
    cdef int64_t total = 0
    cdef Py_ssize_t a
    for a in range(floors.shape[0]):
        total += costs[a] * _level_rank(flat, offsets[a], offsets[a + 1], tau, floors[a], rmax[a])
    return total


def balanced_solve(flat_in, offsets_in, floors_in, rmax_in, costs_in, int64_t budget):
    cdef const double[::1] flat = np.ascontiguousarray(flat_in, dtype=np.float64)
    cdef const int64_t[::1] offsets = np.ascontiguousarray(offsets_in, dtype=np.int64)
    cdef const int64_t[::1] floors = np.ascontiguousarray(floors_in, dtype=np.int64)
    cdef const int64_t[::1] rmax = np.ascontiguousarray(rmax_in, dtype=np.int64)
    cdef const int64_t[::1] costs = np.ascontiguousarray(costs_in, dtype=np.int64)
    cdef Py_ssize_t n = floors.shape[0]
    cdef Py_ssize_t a
    cdef int iterations = 0
    cdef double lo, hi, mid, tau, c, best_c
    cdef int64_t used
    cdef Py_ssize_t best
    out = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] ranks = out

    with nogil:
        if _level_cost(flat, offsets, floors, rmax, costs, 1.0) <= budget:
            tau = 1.0
        else:
            lo = 0.0
            hi = 1.0
            while iterations < MAX_BISECT and hi - lo > TAU_TOL:
                mid = 0.5 * (lo + hi)
                if _level_cost(flat, offsets, floors, rmax, costs, mid) <= budget:
                    lo = mid
                else:
                    hi = mid
                iterations += 1
            tau = lo
        used = 0
        for a in range(n):
            ranks[a] = _level_rank(flat, offsets[a], offsets[a + 1], tau, floors[a], rmax[a])
            used += costs[a] * ranks[a]
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
    return out, tau, iterations


def brute_force_solve(flat_in, offsets_in, floors_in, rmax_in, costs_in, int64_t budget):
    cdef const double[::1] flat = np.ascontiguousarray(flat_in, dtype=np.float64)
    cdef const int64_t[::1] offsets = np.ascontiguousarray(offsets_in, dtype=np.int64)
    cdef const int64_t[::1] floors = np.ascontiguousarray(floors_in, dtype=np.int64)
    cdef const int64_t[::1] rmax = np.ascontiguousarray(rmax_in, dtype=np.int64)
    cdef const int64_t[::1] costs = np.ascontiguousarray(costs_in, dtype=np.int64)
    cdef Py_ssize_t n = floors.shape[0]
    cur_arr = np.array(floors, dtype=np.int64)
    best_arr = np.zeros(n, dtype=np.int64)
    cdef int64_t[::1] cur = cur_arr
    cdef int64_t[::1] best = best_arr
    cdef bint found = False
    cdef bint ok
    cdef double best_val = -np.inf
    cdef int64_t best_max = 0
    cdef double level, val, c
    cdef int64_t used, top
    cdef Py_ssize_t a, b

    for a in range(n):
        if floors[a] > rmax[a]:
            return None, best_val

    with nogil:
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
                    top = cur[0]
                    for a in range(1, n):
                        if cur[a] > top:
                            top = cur[a]
                    if (not found) or val > best_val or (val == best_val and top < best_max):
                        for b in range(n):
                            best[b] = cur[b]
                        best_val = val
                        best_max = top
                        found = True
            a = n - 1
            while a >= 0:
                cur[a] += 1
                if cur[a] <= rmax[a]:
                    break
                cur[a] = floors[a]
                a -= 1
            if a < 0:
                break
    if not found:
        return None, best_val
    return best_arr, best_val
