# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled depth-first branch-and-bound; see ``_search_py`` for the reference semantics."""

from libc.stdlib cimport malloc, free
cimport numpy as cnp
import numpy as np

cnp.import_array()

cdef double SLACK = 1e-9


cdef struct Ctx:
    int n
    int o
    int K
    double B
    int allow_revisit
    long long node_budget
    long long expansions
    int aborted
    int n_values
    const double* D
    const unsigned char* A
    const double* val
    const unsigned char* isv
    const long long* ep
    unsigned char* visited
    int* onroute
    int* actions
    int n_actions
    int* best_actions
    int n_best
    double best_value
    double* keys
    int* cand


cdef inline double dmin(double a, double b) noexcept nogil:
    return a if a <= b else b


cdef inline void record(Ctx* c, double acc) noexcept nogil:
    cdef int t
    if acc > c.best_value:
        c.best_value = acc
        for t in range(c.n_actions):
            c.best_actions[t] = c.actions[t]
        c.n_best = c.n_actions


cdef double bound(Ctx* c, int k, double d, int cur) noexcept nogil:
    cdef double total = 0.0, span
    cdef int p, e1, e2, n = c.n, o = c.o
    cdef const double* D = c.D
    for p in range(n):
        if not c.isv[p] or c.visited[p]:
            continue
        e1 = <int>c.ep[2 * p]
        e2 = <int>c.ep[2 * p + 1]
        span = D[p * n + e1] + D[p * n + e2]
        if k < c.K and 2.0 * dmin(D[o * n + e1], D[o * n + e2]) + span <= c.B + SLACK:
            total += c.val[p]
        elif d + dmin(D[cur * n + e1], D[cur * n + e2]) + span + dmin(D[e1 * n + o], D[e2 * n + o]) <= c.B + SLACK:
            total += c.val[p]
    return total


cdef inline void insert_sorted(double* keys, int* idx, int lo, int hi, double key, int i) noexcept nogil:
    # keys/idx[lo:hi] sorted ascending by (key, index); insert at the right place
    cdef int t = hi
    while t > lo and (keys[t - 1] > key or (keys[t - 1] == key and idx[t - 1] > i)):
        keys[t] = keys[t - 1]
        idx[t] = idx[t - 1]
        t -= 1
    keys[t] = key
    idx[t] = i


cdef void dfs(Ctx* c, int depth, int k, double d, int cur, int transit, int at_start,
              double acc, int n_vis) noexcept nogil:
    cdef int n = c.n, o = c.o
    cdef const double* D = c.D
    cdef const double* Dc = D + cur * n
    cdef const unsigned char* Ac = c.A + cur * n
    cdef double* keys = c.keys + depth * (n + 1)
    cdef int* cand = c.cand + depth * (n + 1)
    cdef int nv = 0, nz = 0, total, t, i, e1, e2, was
    cdef double to_i, via1, via2

    c.expansions += 1
    if c.expansions > c.node_budget:
        c.aborted = 1
        return
    if k > c.K or (at_start and n_vis == c.n_values):
        record(c, acc)
        return
    if at_start:
        record(c, acc)
    if acc + bound(c, k, d, cur) <= c.best_value:
        return

    # value candidates first into cand[0:nv], zero candidates into a second pass
    for i in range(n):
        if i == o or not Ac[i]:
            continue
        if c.isv[i]:
            if c.visited[i]:
                continue
            e1 = <int>c.ep[2 * i]
            e2 = <int>c.ep[2 * i + 1]
            to_i = d + Dc[i]
            via1 = to_i + D[i * n + e1] + D[e1 * n + o]
            via2 = to_i + D[i * n + e2] + D[e2 * n + o]
            if dmin(via1, via2) <= c.B:
                insert_sorted(keys, cand, 0, nv, -(c.val[i] / Dc[i]), i)
                nv += 1
    for i in range(n):
        if i == o or not Ac[i] or c.isv[i]:
            continue
        if not transit and (c.allow_revisit or c.onroute[i] != k):
            if d + Dc[i] + D[i * n + o] <= c.B:
                insert_sorted(keys, cand, nv, nv + nz, Dc[i], i)
                nz += 1
    total = nv + nz
    if not at_start and not transit and Ac[o] and d + Dc[o] <= c.B:
        cand[total] = o
        total += 1

    for t in range(total):
        i = cand[t]
        c.actions[c.n_actions] = i
        c.n_actions += 1
        if i == o:
            record(c, acc)
            dfs(c, depth + 1, k + 1, 0.0, o, 0, 1, acc, n_vis)
        elif c.isv[i]:
            c.visited[i] = 1
            dfs(c, depth + 1, k, d + Dc[i], i, 0, 0, acc + c.val[i], n_vis + 1)
            c.visited[i] = 0
        else:
            was = c.onroute[i]
            c.onroute[i] = k
            dfs(c, depth + 1, k, d + Dc[i], i, 0 if c.isv[cur] else 1, 0, acc, n_vis)
            c.onroute[i] = was
        c.n_actions -= 1
        if c.aborted:
            return


def search(dist, adj, value, is_value, ends, int depot, int K, double budget, bint allow_revisit,
           long long node_budget):
    """Return ``(best_value, best_actions, expansions, complete)``."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] D = np.ascontiguousarray(dist, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=2, mode="c"] A = np.ascontiguousarray(adj, dtype=np.uint8)
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] V = np.ascontiguousarray(value, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1, mode="c"] IV = np.ascontiguousarray(is_value, dtype=np.uint8)
    cdef cnp.ndarray[cnp.int64_t, ndim=2, mode="c"] EP = np.ascontiguousarray(ends, dtype=np.int64)
    cdef int n = D.shape[0]
    cdef int max_depth = 3 * n + 3 * K + 8
    cdef Ctx c
    cdef int t
    c.n = n
    c.o = depot
    c.K = K
    c.B = budget
    c.allow_revisit = 1 if allow_revisit else 0
    c.node_budget = node_budget
    c.expansions = 0
    c.aborted = 0
    c.n_values = int(IV.sum())
    c.D = &D[0, 0]
    c.A = &A[0, 0]
    c.val = &V[0]
    c.isv = &IV[0]
    c.ep = <const long long*>&EP[0, 0]
    c.visited = <unsigned char*>malloc(n * sizeof(unsigned char))
    c.onroute = <int*>malloc(n * sizeof(int))
    c.actions = <int*>malloc(max_depth * sizeof(int))
    c.best_actions = <int*>malloc(max_depth * sizeof(int))
    c.keys = <double*>malloc(max_depth * (n + 1) * sizeof(double))
    c.cand = <int*>malloc(max_depth * (n + 1) * sizeof(int))
    c.n_actions = 0
    c.n_best = 0
    c.best_value = 0.0
    try:
        for t in range(n):
            c.visited[t] = 0
            c.onroute[t] = 0
        with nogil:
            dfs(&c, 0, 1, 0.0, depot, 0, 1, 0.0, 0)
        best = [c.best_actions[t] for t in range(c.n_best)]
        return c.best_value, best, c.expansions, not c.aborted
    finally:
        free(c.visited)
        free(c.onroute)
        free(c.actions)
        free(c.best_actions)
        free(c.keys)
        free(c.cand)
