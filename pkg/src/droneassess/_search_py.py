"""Pure-Python depth-first branch-and-bound over environment action sequences.

Mirror of ``_search.pyx``; both expand nodes in the same order and use the same
floating-point expressions, so the two backends return identical results.

Pruning rules (all optimum-preserving):

* two consecutive moves between zero-value nodes are never needed: the direct
  transit is no longer (triangle inequality) and every zero-value pair is adjacent;
* once a drone idles at the depot all later drones idle too (drones are
  interchangeable);
* a branch is cut when its value plus an admissible bound on the remaining
  collectible value cannot beat the incumbent.
"""
from __future__ import annotations

import numpy as np

SLACK = 1e-9


def search(dist, adj, value, is_value, ends, depot, K, budget, allow_revisit, node_budget):
    """Return ``(best_value, best_actions, expansions, complete)``."""
    D = np.asarray(dist, dtype=np.float64).tolist()
    n = len(D)
    A = np.asarray(adj, dtype=bool).tolist()
    val = np.asarray(value, dtype=np.float64).tolist()
    isv = np.asarray(is_value, dtype=bool).tolist()
    ep = np.asarray(ends, dtype=np.int64).tolist()
    o = int(depot)
    B = float(budget)
    K = int(K)
    value_nodes = [p for p in range(n) if isv[p]]
    n_values = len(value_nodes)

    visited = [False] * n
    onroute = [0] * n
    actions: list[int] = []
    best_value = 0.0
    best_actions: list[int] = []
    expansions = 0
    aborted = False

    def bound(k, d, cur):
        total = 0.0
        for p in value_nodes:
            if visited[p]:
                continue
            e1, e2 = ep[p]
            span = D[p][e1] + D[p][e2]
            if k < K and 2.0 * min(D[o][e1], D[o][e2]) + span <= B + SLACK:
                total += val[p]
            elif d + min(D[cur][e1], D[cur][e2]) + span + min(D[e1][o], D[e2][o]) <= B + SLACK:
                total += val[p]
        return total

    def record(acc):
        nonlocal best_value, best_actions
        if acc > best_value:
            best_value = acc
            best_actions = list(actions)

    def dfs(k, d, cur, transit, at_start, acc, n_vis):
        nonlocal expansions, aborted
        expansions += 1
        if expansions > node_budget:
            aborted = True
            return
        if k > K or (at_start and n_vis == n_values):
            record(acc)
            return
        if at_start:
            record(acc)  # idle here and for every remaining drone
        if acc + bound(k, d, cur) <= best_value:
            return

        Dc, Ac = D[cur], A[cur]
        vals, zeros = [], []
        for i in range(n):
            if i == o or not Ac[i]:
                continue
            if isv[i]:
                if visited[i]:
                    continue
                e1, e2 = ep[i]
                to_i = d + Dc[i]
                via1 = to_i + D[i][e1] + D[e1][o]
                via2 = to_i + D[i][e2] + D[e2][o]
                if min(via1, via2) <= B:
                    vals.append((-(val[i] / Dc[i]), i))
            elif not transit and (allow_revisit or onroute[i] != k):
                if d + Dc[i] + D[i][o] <= B:
                    zeros.append((Dc[i], i))
        vals.sort()
        zeros.sort()
        order = [i for _, i in vals] + [i for _, i in zeros]
        if not at_start and not transit and Ac[o] and d + Dc[o] <= B:
            order.append(o)

        for i in order:
            actions.append(i)
            if i == o:
                record(acc)
                dfs(k + 1, 0.0, o, False, True, acc, n_vis)
            elif isv[i]:
                visited[i] = True
                dfs(k, d + Dc[i], i, False, False, acc + val[i], n_vis + 1)
                visited[i] = False
            else:
                was = onroute[i]
                onroute[i] = k
                dfs(k, d + Dc[i], i, not isv[cur], False, acc, n_vis)
                onroute[i] = was
            actions.pop()
            if aborted:
                return

    dfs(1, 0.0, o, False, True, 0.0, 0)
    return best_value, best_actions, expansions, not aborted
