import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from droneassess import env as E
from droneassess.batchenv import BatchEnv
from droneassess.instgen import GenSpec, generate_instance, make_instance
from droneassess.netcore import Link, RoadNetwork

from conftest import tiny_instance


def square_instance(K=2, p_max=3.0, Q=10.0):
    nodes = ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0))
    links = (Link(0, 1, 1.2, 0.5), Link(1, 2, 1.0, 0.3), Link(2, 3, 1.5, 0.7), Link(3, 0, 1.1, 0.1))
    return make_instance(RoadNetwork(nodes, links), 0, K, p_max, Q, seed=0)


def random_episode(inst, rng, forced=None):
    state = E.reset(inst, forced)
    while not E.is_terminal(state):
        mask = E.feasible_actions(state)
        assert mask.any(), "non-terminal state with an empty mask"
        state, _ = E.step(state, int(rng.choice(np.flatnonzero(mask))))
    return state


def test_reset_state():
    inst = square_instance()
    s = E.reset(inst)
    assert (s.k, s.d, s.current, s.value) == (1, 0.0, 0, 0.0)
    assert not s.visited.any() and not E.is_terminal(s)


def test_initial_mask_follows_adjacency_and_budget():
    inst = square_instance()
    mask = E.feasible_actions(E.reset(inst))
    # depot idle, the other road nodes, and the two value nodes on depot links
    assert set(np.flatnonzero(mask)) == {0, 1, 2, 3, 4, 7}


def test_tight_budget_masks_far_nodes():
    inst = square_instance(p_max=2.0)
    mask = E.feasible_actions(E.reset(inst))
    # node 2 is sqrt(2) away: a return trip needs 2.83 > 2
    assert not mask[2] and mask[1] and mask[3]


def test_step_updates_time_value_and_drone():
    inst = square_instance()
    s, gain = E.step(E.reset(inst), 4)
    assert gain == 0.5 and s.value == 0.5 and s.d == pytest.approx(0.6)
    assert not E.feasible_actions(s)[4]  # collected once
    s, _ = E.step(s, 1)
    s, _ = E.step(s, 0)
    assert s.k == 2 and s.d == 0.0 and s.routes == ((0, 4, 1, 0),)


def test_infeasible_action_rejected():
    inst = square_instance()
    with pytest.raises(E.InfeasibleAction):
        E.step(E.reset(inst), 5)  # not adjacent to the depot
    with pytest.raises(E.InfeasibleAction):
        E.step(E.reset(inst), 99)


def test_forced_first_node():
    inst = square_instance()
    s = E.reset(inst, forced_first=3)
    assert set(np.flatnonzero(E.feasible_actions(s))) == {3}
    s, _ = E.step(s, 3)
    assert E.feasible_actions(s).sum() > 1
    with pytest.raises(ValueError):
        E.reset(inst, forced_first=4)  # value node
    with pytest.raises(ValueError):
        E.reset(inst, forced_first=0)  # depot


def test_terminates_after_last_drone():
    inst = square_instance(K=2)
    s = E.reset(inst)
    s, _ = E.step(s, 0)
    s, _ = E.step(s, 0)
    assert E.is_terminal(s) and len(s.routes) == 2
    with pytest.raises(ValueError):
        E.feasible_actions(s)


def test_terminates_when_everything_collected():
    inst = square_instance(K=3, p_max=10.0)
    s = E.reset(inst)
    for a in (4, 1, 5, 2, 6, 3, 7, 0):
        s, _ = E.step(s, a)
    assert E.is_terminal(s) and s.k == 2
    assert s.value == pytest.approx(1.6)


def test_start_nodes_are_depot_adjacent_zero_nodes():
    inst = square_instance(p_max=2.0)
    assert E.start_nodes(inst) == [1, 3]


def test_evaluate_route_set_reports_every_violation():
    inst = square_instance(K=1, p_max=2.0)
    rep = E.evaluate_route_set(inst, [[0, 4, 1, 5, 2, 0], [0, 4, 0], [1, 0]])
    text = " ".join(rep.violations)
    assert not rep.feasible
    for fragment in ("too many routes", "duration exceeded", "collected twice", "start and end"):
        assert fragment in text
    wide = square_instance(K=1, p_max=5.0)
    assert E.evaluate_route_set(wide, [[0, 5, 0]]).violations == ["route 0: no edge 0->5", "route 0: no edge 5->0"]


def test_idle_routes_are_feasible():
    inst = square_instance()
    rep = E.evaluate_route_set(inst, [[0, 0], [0, 0]])
    assert rep.feasible and rep.value == 0.0


def test_route_set_file_round_trip(tmp_path):
    inst = square_instance()
    routes = [[0, 4, 1, 0]]
    rep = E.evaluate_route_set(inst, routes)
    E.save_route_set(tmp_path / "r.json", routes, rep, solver="hand")
    data = E.load_route_set(tmp_path / "r.json")
    assert data["routes"] == routes and data["feasible"] and data["solver"] == "hand"


def test_geojson_export():
    inst = square_instance()
    gj = E.routes_geojson(inst, [[0, 4, 1, 0]])
    json.dumps(gj)
    feat = gj["features"][0]
    assert gj["type"] == "FeatureCollection" and feat["geometry"]["type"] == "LineString"
    assert len(feat["geometry"]["coordinates"]) == 4
    assert feat["properties"]["value_collected"] == 0.5
    assert feat["properties"]["duration"] == pytest.approx(2.2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.sampled_from([1.0, 2.0, 3.0]), st.integers(4, 14))
def test_random_unmasked_episodes_are_feasible(seed, K, p_max, size):
    inst = generate_instance(GenSpec.for_node_count(2 * size), K, p_max, 10.0, seed)
    rng = np.random.default_rng(seed)
    for _ in range(5):
        state = random_episode(inst, rng)
        rep = E.evaluate_route_set(inst, state.realized_routes())
        assert rep.feasible, rep.violations
        assert rep.value == pytest.approx(state.value, abs=1e-12)
        assert all(d <= inst.budget for d in rep.durations)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_batched_masks_match_scalar_env(seed, K):
    insts = [generate_instance(GenSpec.for_node_count(16), K, 2.0, 10.0, seed + j) for j in range(3)]
    benv = BatchEnv(insts, 2)
    rng = np.random.default_rng(seed)
    states = [[E.reset(i) for _ in range(2)] for i in insts]
    while not benv.all_done():
        mask = benv.mask()
        action = torch.zeros(3, 2, dtype=torch.long)
        for b in range(3):
            for p in range(2):
                s = states[b][p]
                if E.is_terminal(s):
                    assert bool(benv.done[b, p])
                    action[b, p] = insts[b].depot
                    continue
                ref = E.feasible_actions(s)
                np.testing.assert_array_equal(mask[b, p].numpy(), ref)
                a = int(rng.choice(np.flatnonzero(ref)))
                action[b, p] = a
                states[b][p], _ = E.step(s, a)
        benv.step(action)
    for b in range(3):
        for p in range(2):
            assert float(benv.value[b, p]) == states[b][p].value


def test_batched_forced_start():
    inst = tiny_instance(4, 5, 5, K=2, p_max=2.0)
    starts = E.start_nodes(inst)
    benv = BatchEnv([inst], len(starts), torch.tensor([starts]))
    mask = benv.mask()
    for p, s in enumerate(starts):
        assert set(np.flatnonzero(mask[0, p].numpy())) == {s}
