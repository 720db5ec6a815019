import numpy as np
import pytest

from droneassess.baselines import (actions_to_routes, emit_lp, gap, parse_lp, solve_exact_dfs,
                                   solve_exact_norevisit, solve_greedy, solve_lp_model, write_lp_model)
from droneassess.env import evaluate_route_set
from droneassess.instgen import GenSpec, generate_instance, make_instance
from droneassess.netcore import Link, RoadNetwork

from conftest import tiny_instance


def toy_instance(K=1, p_max=3.7):
    """Unit square, depot at the origin, dyadic values so objective sums are exact."""
    nodes = ((0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0))
    links = (Link(0, 1, 1.2, 0.5), Link(1, 2, 1.0, 0.25), Link(2, 3, 1.5, 0.75), Link(3, 0, 1.1, 0.125))
    return make_instance(RoadNetwork(nodes, links), 0, K, p_max, 10.0, seed=0)


def test_toy_optimum_by_hand():
    # with 3.7 time units the best tour is 0-4-1-5-2-0 (0.6 + 0.6 + 0.5 + 0.5 + sqrt 2 = 3.61) -> 0.75;
    # every other simple tour collecting 0.75 or more needs at least 3.91
    inst = toy_instance()
    sol = solve_exact_norevisit(inst)
    assert sol.optimal and sol.value == 0.75
    assert sol.routes == [[0, 4, 1, 5, 2, 0]]
    # revisiting node 3 closes the loop 0-7-3-6-3-0 (0.55 + 0.55 + 0.75 + 0.75 + 1 = 3.6) -> 0.875
    loop = solve_exact_dfs(inst)
    assert loop.value == 0.875 and loop.routes == [[0, 7, 3, 6, 3, 0]]


def test_actions_to_routes():
    assert actions_to_routes(0, [3, 5, 0, 0]) == [[0, 3, 5, 0], [0, 0]]


def test_gap_definition():
    assert gap(4.0, 3.0) == 0.25
    assert gap(2.0, 2.5) == -0.25
    with pytest.raises(ValueError, match="undefined gap"):
        gap(0.0, 1.0)


def test_gap_of_rounded_means():
    # averaged per-instance gaps differ from the gap of rounded means by up to ~3e-4
    assert gap(15.71, 15.07) == pytest.approx(0.0404, abs=5e-4)
    assert gap(21.50, 12.73) == pytest.approx(0.4078, abs=5e-4)
    assert gap(7.5, 7.5) == 0.0


@pytest.mark.parametrize("seed", range(15))
def test_greedy_is_feasible_and_bounded_by_exact(seed):
    inst = tiny_instance(seed, 5, 5, K=2, p_max=1.6)
    g = solve_greedy(inst)
    assert evaluate_route_set(inst, g.routes).feasible
    assert g.value <= solve_exact_dfs(inst).value + 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_greedy_feasible_on_larger_instances(seed):
    inst = generate_instance(GenSpec.for_node_count(100), 3, 3.0, 10.0, seed)
    g = solve_greedy(inst)
    rep = evaluate_route_set(inst, g.routes)
    assert rep.feasible and g.value > 0


def test_norevisit_never_beats_revisit():
    for seed in range(10):
        inst = tiny_instance(seed, 5, 5, K=2, p_max=1.6)
        assert solve_exact_norevisit(inst).value <= solve_exact_dfs(inst).value + 1e-9


def test_lp_emission_is_deterministic():
    a = emit_lp(toy_instance(K=2))
    b = emit_lp(toy_instance(K=2))
    assert a == b
    assert a.startswith("\\ drone assessment routing model\nMaximize\n") and a.endswith("End\n")
    assert all(len(line) <= 200 for line in a.splitlines())


def test_lp_structure():
    inst = toy_instance(K=2)
    model = parse_lp(emit_lp(inst))
    n_arcs = int(inst.network.adjacency.sum())
    assert len(model.binaries) == 2 * n_arcs
    assert len(model.generals) == 2 * inst.network.node_count
    names = {c[0] for c in model.constraints}
    assert {"once_4", "leave_1", "enter_2", "battery_1", "horizon_2"} <= names
    assert not any(n.startswith("order_") and n.endswith("_0") for n in names)
    assert model.objective["x_1_4_0"] == 0.5


def test_lp_round_trip_is_canonical():
    text = emit_lp(tiny_instance(2, 5, 5, K=2, p_max=1.6))
    model = parse_lp(text)
    again = write_lp_model(model)
    assert write_lp_model(parse_lp(again)) == again
    assert parse_lp(again) == model


def test_lp_parser_rejects_bad_rows():
    with pytest.raises(ValueError):
        parse_lp("Maximize\n obj: x\nSubject To\n c: x + y\nEnd\n")
    with pytest.raises(ValueError):
        parse_lp("x + y\n")


def test_lp_optimum_matches_norevisit_scipy():
    pytest.importorskip("scipy")
    for K, p_max in ((1, 2.5), (1, 3.7), (2, 3.7), (2, 4.0)):
        inst = toy_instance(K, p_max)
        assert solve_lp_model(parse_lp(emit_lp(inst))) == solve_exact_norevisit(inst).value


@pytest.mark.parametrize("seed", [3, 4, 6])
def test_lp_optimum_matches_norevisit_random(seed):
    pytest.importorskip("scipy")
    inst = tiny_instance(seed, 5, 5, K=2, p_max=1.6)
    lp_value = solve_lp_model(parse_lp(emit_lp(inst)))
    assert lp_value == pytest.approx(solve_exact_norevisit(inst).value, abs=1e-6)


def test_lp_optimum_matches_norevisit_highspy(tmp_path):
    highspy = pytest.importorskip("highspy")
    inst = toy_instance(K=2, p_max=3.7)
    path = tmp_path / "toy.lp"
    path.write_text(emit_lp(inst))
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.readModel(str(path))
    h.run()
    assert h.getModelStatus() == highspy.HighsModelStatus.kOptimal
    assert h.getInfo().objective_function_value == solve_exact_norevisit(inst).value
