"""Reference solvers and the MILP export.

``solve_exact_dfs`` searches environment semantics (zero-value nodes may be
revisited, so routes may loop); ``solve_exact_norevisit`` forbids any repeated
node inside one drone tour, which is the semantics of the MTZ-constrained MILP
written by :func:`emit_lp`.
"""
from __future__ import annotations

import re
import time
from dataclasses import dataclass, field

import numpy as np

from . import env as E
from .instgen import ProblemInstance
from .search import search


@dataclass
class Solution:
    routes: list[list[int]]
    value: float
    solver: str
    seconds: float = 0.0
    optimal: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"routes": self.routes, "value": self.value, "solver": self.solver,
                "seconds": self.seconds, "optimal": self.optimal, **self.extra}


def actions_to_routes(depot: int, actions) -> list[list[int]]:
    routes, cur = [], [depot]
    for a in actions:
        cur.append(int(a))
        if a == depot:
            routes.append(cur)
            cur = [depot]
    return routes


def drop_idle(routes) -> list[list[int]]:
    return [list(r) for r in routes if len(r) > 2]


def _exact(inst: ProblemInstance, node_budget: int, allow_revisit: bool, name: str, backend=None) -> Solution:
    t0 = time.perf_counter()
    value, actions, expansions, complete = search(inst.network, inst.K, inst.budget, allow_revisit,
                                                   node_budget, backend)
    routes = actions_to_routes(inst.depot, actions)
    report = E.evaluate_route_set(inst, routes)
    if not report.feasible:
        raise AssertionError(f"{name} produced an infeasible route set: {report.violations}")
    return Solution(routes, report.value, name, time.perf_counter() - t0, complete,
                    {"expansions": expansions})


def solve_exact_dfs(inst: ProblemInstance, node_budget: int = 10_000_000, backend=None) -> Solution:
    return _exact(inst, node_budget, True, "exact", backend)


def solve_exact_norevisit(inst: ProblemInstance, node_budget: int = 10_000_000, backend=None) -> Solution:
    return _exact(inst, node_budget, False, "exact-norevisit", backend)


def solve_greedy(inst: ProblemInstance) -> Solution:
    """Value-per-time greedy; detours to the nearest zero-value node that opens up new value."""
    t0 = time.perf_counter()
    net = inst.network
    o, D = net.depot, net.dist
    state = E.reset(inst)
    while not E.is_terminal(state):
        mask = E.feasible_actions(state)
        cur = state.current
        vals = np.flatnonzero(mask & net.is_value_node)
        if vals.size:
            score = net.value[vals] / (2.0 * D[cur, vals])
            action = int(vals[np.argmax(score)])
        else:
            zeros = [int(z) for z in np.flatnonzero(mask & ~net.is_value_node) if z != o]
            zeros.sort(key=lambda z: (D[cur, z], z))
            action = None
            for z in zeros:
                nxt, _ = E.step(state, z)
                if (E.feasible_actions(nxt) & net.is_value_node).any():
                    action = z
                    break
            if action is None:
                if mask[o]:
                    action = o
                else:
                    # stranded on a value node whose endpoints are not the depot
                    action = min(zeros, key=lambda z: (D[z, o], z))
        state, _ = E.step(state, action)
    routes = drop_idle(state.routes)
    report = E.evaluate_route_set(inst, routes)
    return Solution(routes, report.value, "greedy", time.perf_counter() - t0, False)


def gap(reference_value: float, other_value: float) -> float:
    if reference_value <= 0:
        raise ValueError("undefined gap")
    return (reference_value - other_value) / reference_value


# ---------------------------------------------------------------- LP export

def _fmt(c: float) -> str:
    c = float(c)
    return repr(int(c)) if c.is_integer() and abs(c) < 1e15 else repr(c)


def _expr(terms) -> str:
    out = []
    for coef, var in terms:
        sign = "-" if coef < 0 else "+"
        mag = abs(coef)
        body = var if mag == 1 else f"{_fmt(mag)} {var}"
        out.append(f"{sign} {body}")
    s = " ".join(out)
    return s[2:] if s.startswith("+ ") else s


def _wrap(line: str, width: int = 200) -> list[str]:
    """Break a long row before ``+``/``-`` operators so no line exceeds ``width``."""
    if len(line) <= width:
        return [line]
    terms, cur = [], []
    for tok in line.split(" "):
        if tok in ("+", "-") and cur:
            terms.append(" ".join(cur))
            cur = []
        cur.append(tok)
    terms.append(" ".join(cur))
    parts, row = [], ""
    for term in terms:
        if row and len(row) + 1 + len(term) > width:
            parts.append(row)
            row = "   " + term
        else:
            row = f"{row} {term}" if row else term
    parts.append(row)
    return parts


def emit_lp(inst: ProblemInstance) -> str:
    """The assessment MILP in CPLEX LP format.

    Variables ``x_k_i_j`` (drone ``k`` from 1, arc ``i -> j``) and ``u_k_i``
    (visit order).  The max-over-drones time cap becomes one cap per drone and
    the ordering constraints skip arcs entering the depot, which closes every tour.
    """
    net = inst.network
    n, o, K = net.node_count, net.depot, inst.K
    M = n
    arcs = [(i, j) for i in range(n) for j in range(n) if net.adjacency[i, j]]
    out_arcs = {i: [] for i in range(n)}
    in_arcs = {i: [] for i in range(n)}
    for i, j in arcs:
        out_arcs[i].append(j)
        in_arcs[j].append(i)
    x = lambda k, i, j: f"x_{k}_{i}_{j}"
    u = lambda k, i: f"u_{k}_{i}"
    drones = range(1, K + 1)
    value_nodes = [p for p in range(n) if net.is_value_node[p]]

    lines = ["\\ drone assessment routing model", "Maximize"]
    obj = [(float(net.value[p]), x(k, p, j)) for k in drones for p in value_nodes for j in out_arcs[p]]
    if not obj and arcs:
        obj = [(0.0, x(1, *arcs[0]))]
    lines += _wrap(" obj: " + _expr(obj))
    lines.append("Subject To")

    def con(name, terms, op, rhs):
        lines.extend(_wrap(f" {name}: {_expr(terms)} {op} {_fmt(rhs)}"))

    for p in value_nodes:
        con(f"once_{p}", [(1.0, x(k, p, j)) for k in drones for j in out_arcs[p]], "<=", 1)
    for k in drones:
        for i in range(n):
            terms = [(1.0, x(k, j, i)) for j in in_arcs[i]] + [(-1.0, x(k, i, j)) for j in out_arcs[i]]
            con(f"flow_{k}_{i}", terms, "=", 0)
    for k in drones:
        con(f"leave_{k}", [(1.0, x(k, o, j)) for j in out_arcs[o]], "=", 1)
        con(f"enter_{k}", [(1.0, x(k, i, o)) for i in in_arcs[o]], "=", 1)
    for k in drones:
        con(f"battery_{k}", [(float(net.dist[i, j]), x(k, i, j)) for i, j in arcs], "<=", inst.Q)
    for k in drones:
        con(f"horizon_{k}", [(float(net.dist[i, j]), x(k, i, j)) for i, j in arcs], "<=", inst.p_max)
    for k in drones:
        for i, j in arcs:
            if j == o:
                continue
            con(f"order_{k}_{i}_{j}", [(1.0, u(k, i)), (-1.0, u(k, j)), (float(M), x(k, i, j))], "<=", M - 1)
    lines.append("Bounds")
    for k in drones:
        for i in range(n):
            lines.append(f" 1 <= {u(k, i)} <= {M}")
    lines.append("Binaries")
    names = [x(k, i, j) for k in drones for i, j in arcs]
    lines += [" " + v for v in names]
    lines.append("Generals")
    lines += [" " + u(k, i) for k in drones for i in range(n)]
    lines.append("End")
    return "\n".join(lines) + "\n"


@dataclass
class LPModel:
    sense: str
    objective: dict[str, float]
    constraints: list[tuple[str, dict[str, float], str, float]]
    bounds: dict[str, tuple[float, float]]
    binaries: list[str]
    generals: list[str]

    def variables(self) -> list[str]:
        seen: dict[str, None] = {}
        for v in self.objective:
            seen[v] = None
        for _, terms, _, _ in self.constraints:
            for v in terms:
                seen[v] = None
        for v in list(self.bounds) + self.binaries + self.generals:
            seen[v] = None
        return list(seen)


_SECTIONS = {
    "maximize": "obj", "maximum": "obj", "max": "obj",
    "minimize": "obj", "minimum": "obj", "min": "obj",
    "subject to": "st", "such that": "st", "st": "st", "s.t.": "st",
    "bounds": "bounds", "binaries": "bin", "binary": "bin", "generals": "gen", "general": "gen",
    "end": "end",
}
_TOKEN = re.compile(r"\s*(<=|>=|=<|=>|=|[+-]|[A-Za-z_][A-Za-z0-9_.]*|[0-9.]+(?:[eE][+-]?[0-9]+)?|:)")


def _tokens(text: str) -> list[str]:
    out, pos = [], 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ValueError(f"unexpected LP text near {text[pos:pos + 20]!r}")
        out.append(m.group(1))
        pos = m.end()
    return out


def _linear(tokens: list[str]) -> dict[str, float]:
    terms: dict[str, float] = {}
    sign, coef = 1.0, None
    for tok in tokens:
        if tok in "+-":
            sign = -1.0 if tok == "-" else 1.0
        elif tok[0].isdigit() or tok[0] == ".":
            coef = float(tok)
        else:
            terms[tok] = terms.get(tok, 0.0) + sign * (1.0 if coef is None else coef)
            sign, coef = 1.0, None
    return terms


def parse_lp(text: str) -> LPModel:
    """Tokenize the LP subset written by :func:`emit_lp` (sections, linear rows, bounds, types)."""
    sections: dict[str, list[str]] = {"obj": [], "st": [], "bounds": [], "bin": [], "gen": []}
    sense, cur = None, None
    for raw in text.splitlines():
        line = raw.split("\\", 1)[0].strip()
        if not line:
            continue
        key = line.lower()
        if key in _SECTIONS:
            cur = _SECTIONS[key]
            if cur == "obj":
                sense = "max" if key.startswith("max") else "min"
            if cur == "end":
                break
            continue
        if cur is None:
            raise ValueError(f"LP text before any section: {line!r}")
        sections[cur].append(line)

    def statements(lines):
        # a statement starts with "name:"; continuation lines start with an operator
        out = []
        for line in lines:
            if out and line[0] in "+-":
                out[-1] += " " + line
            else:
                out.append(line)
        return out

    objective: dict[str, float] = {}
    for stmt in statements(sections["obj"]):
        toks = _tokens(stmt)
        if len(toks) > 1 and toks[1] == ":":
            toks = toks[2:]
        objective.update(_linear(toks))
    constraints = []
    for stmt in statements(sections["st"]):
        toks = _tokens(stmt)
        name = ""
        if len(toks) > 1 and toks[1] == ":":
            name, toks = toks[0], toks[2:]
        ops = [t for t in toks if t in ("<=", ">=", "=<", "=>", "=")]
        if len(ops) != 1:
            raise ValueError(f"constraint {name!r} needs exactly one relation")
        k = toks.index(ops[0])
        op = {"=<": "<=", "=>": ">="}.get(ops[0], ops[0])
        rhs_toks = toks[k + 1:]
        rhs = float("".join(rhs_toks))
        constraints.append((name, _linear(toks[:k]), op, rhs))
    bounds: dict[str, tuple[float, float]] = {}
    for stmt in sections["bounds"]:
        toks = _tokens(stmt)
        if len(toks) == 5 and toks[1] == "<=" and toks[3] == "<=":
            bounds[toks[2]] = (float(toks[0]), float(toks[4]))
        else:
            raise ValueError(f"unsupported bound {stmt!r}")
    binaries = [t for line in sections["bin"] for t in line.split()]
    generals = [t for line in sections["gen"] for t in line.split()]
    return LPModel(sense or "max", objective, constraints, bounds, binaries, generals)


def write_lp_model(model: LPModel) -> str:
    """Canonical re-serialization of a parsed model (round-trip check)."""
    lines = ["Maximize" if model.sense == "max" else "Minimize"]
    lines += _wrap(" obj: " + _expr([(c, v) for v, c in model.objective.items()]))
    lines.append("Subject To")
    for name, terms, op, rhs in model.constraints:
        lines += _wrap(f" {name}: {_expr([(c, v) for v, c in terms.items()])} {op} {_fmt(rhs)}")
    lines.append("Bounds")
    for v, (lo, hi) in model.bounds.items():
        lines.append(f" {_fmt(lo)} <= {v} <= {_fmt(hi)}")
    lines.append("Binaries")
    lines += [" " + v for v in model.binaries]
    lines.append("Generals")
    lines += [" " + v for v in model.generals]
    lines.append("End")
    return "\n".join(lines) + "\n"


def solve_lp_model(model: LPModel) -> float:
    """Optimal objective of a parsed model via SciPy's HiGHS MILP interface."""
    from scipy.optimize import LinearConstraint, milp, Bounds
    from scipy.sparse import lil_matrix

    names = model.variables()
    col = {v: t for t, v in enumerate(names)}
    c = np.zeros(len(names))
    for v, coef in model.objective.items():
        c[col[v]] = coef
    if model.sense == "max":
        c = -c
    A = lil_matrix((len(model.constraints), len(names)))
    lo = np.full(len(model.constraints), -np.inf)
    hi = np.full(len(model.constraints), np.inf)
    for r, (_, terms, op, rhs) in enumerate(model.constraints):
        for v, coef in terms.items():
            A[r, col[v]] = coef
        if op in ("<=", "="):
            hi[r] = rhs
        if op in (">=", "="):
            lo[r] = rhs
    vlo, vhi = np.zeros(len(names)), np.full(len(names), np.inf)
    integrality = np.zeros(len(names))
    for v in model.binaries:
        vlo[col[v]], vhi[col[v]], integrality[col[v]] = 0, 1, 1
    for v in model.generals:
        integrality[col[v]] = 1
    for v, (a, b) in model.bounds.items():
        vlo[col[v]], vhi[col[v]] = a, b
    res = milp(c, constraints=LinearConstraint(A.tocsr(), lo, hi), integrality=integrality,
               bounds=Bounds(vlo, vhi))
    if res.status != 0:
        raise RuntimeError(f"MILP solve failed: {res.message}")
    # report the objective of the rounded integral point, free of solver tolerances
    x = np.where(integrality == 1, np.round(res.x), res.x)
    total = 0.0
    for v, coef in model.objective.items():
        total += coef * x[col[v]]
    return float(total)
