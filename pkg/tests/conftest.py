import numpy as np
import pytest

from droneassess import env as E
from droneassess.instgen import GenSpec, generate_instance


def tiny_instance(seed, n_nodes=4, n_links=4, K=2, p_max=1.5, Q=10.0):
    return generate_instance(GenSpec(n_nodes=n_nodes, n_links=n_links), K, p_max, Q, seed)


def brute_force(inst, allow_revisit=True, limit=2_000_000):
    """Best value over every unmasked action sequence (no pruning of any kind).

    With ``allow_revisit=False`` a drone may not re-enter a zero-value node it
    already visited on its current tour.
    Returns ``None`` when the enumeration exceeds ``limit`` states.
    """
    o = inst.depot
    count = 0
    best = 0.0

    def walk(state, tour):
        nonlocal count, best
        count += 1
        if count > limit:
            raise OverflowError
        if len(state.path) <= 1:  # at a route boundary, so every tour is closed
            best = max(best, state.value)
        if E.is_terminal(state):
            return
        mask = E.feasible_actions(state)
        for a in np.flatnonzero(mask):
            a = int(a)
            if not allow_revisit and a != o and a in tour:
                continue
            nxt, _ = E.step(state, a)
            walk(nxt, {o} if a == o else tour | {a})

    try:
        walk(E.reset(inst), {o})
    except OverflowError:
        return None
    return best


@pytest.fixture
def small_instance():
    return tiny_instance(3, n_nodes=5, n_links=5, K=2, p_max=1.5)


@pytest.fixture
def medium_instance():
    return generate_instance(GenSpec.for_node_count(20), 2, 2.0, 10.0, 1)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, in criterion order."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" in props and rep.when == "call":
                lines.append((props["criterion"], "PASS" if rep.passed else "FAIL", props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for number, status, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {number:>2}: {status}  {detail}")
