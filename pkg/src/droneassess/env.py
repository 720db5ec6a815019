"""Sequential multi-drone routing environment and an independent route validator.

Drones are dispatched one after another from the depot.  A step moves the
active drone to an adjacent node; moving to the depot closes its route and
activates the next drone.  The feasibility mask enforces adjacency,
single collection of every value node, and a per-drone time budget
``min(p_max, Q)`` with a one-move look-ahead so the drone can always get home.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .instgen import ProblemInstance


class InfeasibleAction(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EnvState:
    instance: ProblemInstance
    k: int
    d: float
    current: int
    visited: np.ndarray
    value: float
    routes: tuple[tuple[int, ...], ...]
    path: tuple[int, ...]
    forced: int | None = None
    n_visited: int = 0

    def realized_routes(self) -> list[list[int]]:
        return [list(r) for r in self.routes]


def reset(inst: ProblemInstance, forced_first: int | None = None) -> EnvState:
    net = inst.network
    if forced_first is not None:
        forced_first = int(forced_first)
        if (
            not 0 <= forced_first < net.node_count
            or forced_first == net.depot
            or net.is_value_node[forced_first]
            or not net.adjacency[net.depot, forced_first]
        ):
            raise ValueError(f"invalid forced first node {forced_first}")
    visited = np.zeros(net.node_count, dtype=bool)
    visited.setflags(write=False)
    state = EnvState(inst, 1, 0.0, net.depot, visited, 0.0, (), (net.depot,), forced_first)
    if forced_first is not None and not _budget_mask(state)[forced_first]:
        raise ValueError(f"forced first node {forced_first} cannot be reached within the time budget")
    return state


def is_terminal(state: EnvState) -> bool:
    inst = state.instance
    if state.k > inst.K:
        return True
    at_depot = state.current == inst.depot and len(state.path) == 1
    return at_depot and state.n_visited == inst.network.n_value_nodes


def _budget_mask(state: EnvState) -> np.ndarray:
    inst = state.instance
    net = inst.network
    D = net.dist
    o, cur, d, B = net.depot, state.current, state.d, inst.budget
    adj = net.adjacency[cur]
    to_i = d + D[cur]
    mask = adj & ~net.is_value_node & (to_i + D[:, o] <= B)
    m = net.n_original
    if net.n_value_nodes:
        p = np.arange(m, net.node_count)
        e1, e2 = net.endpoints[m:, 0], net.endpoints[m:, 1]
        via1 = to_i[m:] + D[p, e1] + D[e1, o]
        via2 = to_i[m:] + D[p, e2] + D[e2, o]
        mask[m:] = adj[m:] & ~state.visited[m:] & (np.minimum(via1, via2) <= B)
    mask[o] = (cur == o) or (adj[o] and d + D[cur, o] <= B)
    return mask


def feasible_actions(state: EnvState) -> np.ndarray:
    if is_terminal(state):
        raise ValueError("terminal state has no actions")
    mask = _budget_mask(state)
    if state.forced is not None:
        only = np.zeros_like(mask)
        only[state.forced] = mask[state.forced]
        mask = only
    return mask


def step(state: EnvState, action: int) -> tuple[EnvState, float]:
    action = int(action)
    mask = feasible_actions(state)
    if not 0 <= action < mask.shape[0] or not mask[action]:
        raise InfeasibleAction("infeasible action")
    inst = state.instance
    net = inst.network
    o = net.depot
    if action == o:
        route = state.path + (o,)
        k = state.k + 1
        path = (o,) if k <= inst.K else ()
        return replace(state, k=k, d=0.0, current=o, routes=state.routes + (route,), path=path, forced=None), 0.0
    d = state.d + net.dist[state.current, action]
    delta = 0.0
    visited, n_visited, value = state.visited, state.n_visited, state.value
    if net.is_value_node[action]:
        visited = visited.copy()
        visited[action] = True
        visited.setflags(write=False)
        n_visited += 1
        delta = float(net.value[action])
        value = value + delta
    new = replace(state, d=d, current=action, visited=visited, n_visited=n_visited, value=value,
                  path=state.path + (action,), forced=None)
    return new, delta


def rollout_actions(inst: ProblemInstance, actions, forced_first: int | None = None) -> EnvState:
    state = reset(inst, forced_first)
    for a in actions:
        state, _ = step(state, a)
    return state


def start_nodes(inst: ProblemInstance) -> list[int]:
    """Zero-value depot neighbours reachable from the depot at time 0 (multi-start set)."""
    net = inst.network
    state = reset(inst)
    mask = _budget_mask(state)
    return [i for i in range(net.n_original) if i != net.depot and mask[i]]


@dataclass
class RouteReport:
    value: float
    feasible: bool
    violations: list[str] = field(default_factory=list)
    durations: list[float] = field(default_factory=list)
    collected: list[float] = field(default_factory=list)


def evaluate_route_set(inst: ProblemInstance, routes) -> RouteReport:
    """Replay ``routes`` from scratch and list every rule they break."""
    net = inst.network
    o, n, B = net.depot, net.node_count, inst.budget
    D, adj = net.dist, net.adjacency
    report = RouteReport(0.0, True)
    seen: set[int] = set()
    if len(routes) > inst.K:
        report.violations.append(f"too many routes: {len(routes)} > K={inst.K}")
    for r, route in enumerate(routes):
        route = [int(v) for v in route]
        if any(not 0 <= v < n for v in route):
            report.violations.append(f"route {r}: unknown node index")
            report.durations.append(0.0)
            report.collected.append(0.0)
            continue
        if len(route) < 2 or route[0] != o or route[-1] != o:
            report.violations.append(f"route {r}: must start and end at the depot")
        if o in route[1:-1]:
            report.violations.append(f"route {r}: passes through the depot")
        dur, got = 0.0, 0.0
        for a, b in zip(route, route[1:]):
            if not adj[a, b] and not (a == b == o and len(route) == 2):
                report.violations.append(f"route {r}: no edge {a}->{b}")
            dur = dur + D[a, b]
            if net.is_value_node[b]:
                if b in seen:
                    report.violations.append(f"route {r}: value node {b} collected twice")
                else:
                    seen.add(b)
                    got = got + float(net.value[b])
                    report.value = report.value + float(net.value[b])
        if dur > B:
            report.violations.append(f"route {r}: duration exceeded ({float(dur)!r} > {float(B)!r})")
        report.durations.append(float(dur))
        report.collected.append(got)
    report.feasible = not report.violations
    return report


def save_route_set(path, routes, report: RouteReport, **extra) -> None:
    data = {
        "routes": [[int(v) for v in r] for r in routes],
        "value": report.value,
        "feasible": report.feasible,
        "violations": list(report.violations),
        **extra,
    }
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


def load_route_set(path) -> dict:
    return json.loads(Path(path).read_text())


def routes_geojson(inst: ProblemInstance, routes) -> dict:
    report = evaluate_route_set(inst, routes)
    coords = inst.network.coords
    features = []
    for k, route in enumerate(routes):
        features.append({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": [coords[v].tolist() for v in route]},
            "properties": {
                "drone": k + 1,
                "duration": report.durations[k],
                "value_collected": report.collected[k],
            },
        })
    return {"type": "FeatureCollection", "features": features}
