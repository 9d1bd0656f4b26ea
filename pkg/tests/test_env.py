import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from softvrp.env import (
    EnvConfig,
    RouteState,
    SwapAction,
    apply_swap,
    arrival_times,
    cap_cost,
    enumerate_actions,
    evaluate,
    objective,
    swap_sequence,
    total_distance,
    tw_cost,
    tw_terms,
    waiting_time,
)
from softvrp.errors import ActionError, InstanceValidationError, UnsupportedVariantError
from softvrp.fastenv import BatchEvaluator
from softvrp.init_solution import initial_route
from softvrp.instance import Node, ProblemInstance, Variant, generate_instance

INF = math.inf


def cvrp(points, demands, cap=30.0, vehicles=None):
    nodes = (Node(0, *points[0]),) + tuple(Node(i, *p, demand=d) for i, (p, d) in enumerate(zip(points[1:], demands), 1))
    return ProblemInstance(Variant.CVRP, nodes, capacity=cap, num_vehicles=vehicles)


def tsptw(points, windows):
    nodes = (Node(0, *points[0], 0.0, 0.0, INF),) + tuple(
        Node(i, *p, 0.0, *w) for i, (p, w) in enumerate(zip(points[1:], windows), 1))
    return ProblemInstance(Variant.TSPTW, nodes, num_vehicles=1)


def test_total_distance_hand_example():
    inst = cvrp([(0, 0), (0, 1), (1, 1)], [1, 1])
    assert total_distance(RouteState((0, 1, 2, 0), inst)) == pytest.approx(2 + math.sqrt(2), abs=1e-12)


def test_depot_only_route_has_zero_distance():
    inst = cvrp([(0, 0), (0, 1)], [1], vehicles=2)
    state = RouteState((0, 1, 0, 0), inst)
    assert total_distance(RouteState((0, 0, 1, 0), inst)) == total_distance(state)
    assert state.routes() == [[1], []]


def test_distance_invariant_under_reversal():
    inst = generate_instance(Variant.CVRP, 7, seed=2)
    seq = initial_route(inst).sequence
    inst = initial_route(inst).instance
    assert total_distance(RouteState(seq, inst)) == pytest.approx(total_distance(RouteState(seq[::-1], inst)), abs=1e-12)


def test_arrival_with_waiting():
    inst = tsptw([(0, 0), (0.5, 0)], [(1, 2)])
    state = RouteState((0, 1, 0), inst)
    assert arrival_times(state)[1] == pytest.approx(0.5)
    assert waiting_time(state) == pytest.approx(0.5)
    assert evaluate(state).target == pytest.approx(1.5)


def test_open_windows_give_cumulative_distance():
    inst = tsptw([(0, 0), (0.3, 0), (0.3, 0.4)], [(0, INF), (0, INF)])
    state = RouteState((0, 1, 2, 0), inst)
    assert arrival_times(state) == pytest.approx([0, 0.3, 0.7, 1.2])


def test_clock_resets_per_vehicle():
    pts = [(0, 0), (0.9, 0), (0, 0.2)]
    nodes = (Node(0, 0, 0, 0, 0, INF), Node(1, 0.9, 0, 1, 0, INF), Node(2, 0, 0.2, 1, 0, INF))
    inst = ProblemInstance(Variant.CVRPTW, nodes, capacity=5, num_vehicles=2)
    arr = arrival_times(RouteState((0, 1, 0, 2, 0), inst))
    assert arr[3] == pytest.approx(0.2)


@pytest.mark.parametrize("arrival,expected", [(5.0, 1.0), (3.0, 0.0), (1.0, 1.0)])
def test_tw_cost_examples(arrival, expected):
    inst = tsptw([(0, 0), (arrival, 0)], [(2, 4)])
    assert tw_cost(RouteState((0, 1, 0), inst)) == pytest.approx(expected)


def test_literal_form_penalizes_in_window_arrivals():
    inst = tsptw([(0, 0), (3, 0)], [(2, 4)])
    early, late = tw_terms(RouteState((0, 1, 0), inst), "literal")
    assert (early, late) == pytest.approx((1.0, 1.0))


def test_earliness_enters_cost_only_when_double_counted():
    inst = tsptw([(0, 0), (1, 0)], [(2, 4)])
    state = RouteState((0, 1, 0), inst)
    assert evaluate(state).costs == (0.0,)
    assert evaluate(state, EnvConfig(double_count_earliness=True)).costs == pytest.approx((1.0,))
    assert evaluate(state).waiting == pytest.approx(1.0)


def test_cap_cost_examples():
    inst = cvrp([(0, 0), (0.1, 0), (0.2, 0)], [20, 15])
    assert cap_cost(RouteState((0, 1, 2, 0), inst)) == pytest.approx(5 / 30)
    inst = cvrp([(0, 0)] + [(0.1 * i, 0) for i in range(1, 5)], [20, 15, 18, 15], vehicles=2)
    assert cap_cost(RouteState((0, 1, 2, 0, 3, 4, 0), inst)) == pytest.approx(5 / 30 + 3 / 30)
    assert cap_cost(RouteState((0, 1, 0, 2, 3, 4, 0), inst)) == pytest.approx((48 - 30) / 30)
    assert cap_cost(RouteState((0, 1, 4, 0, 2, 3, 0), inst)) == pytest.approx(5 / 30 + 3 / 30)


def test_under_loaded_vehicle_does_not_offset():
    inst = cvrp([(0, 0), (0.1, 0), (0.2, 0), (0.3, 0)], [20, 15, 1], vehicles=2)
    assert cap_cost(RouteState((0, 1, 2, 0, 3, 0), inst)) == pytest.approx(5 / 30)


def test_wrong_variant_evaluators():
    inst = cvrp([(0, 0), (0.1, 0)], [1])
    with pytest.raises(UnsupportedVariantError):
        arrival_times(RouteState((0, 1, 0), inst))
    with pytest.raises(UnsupportedVariantError):
        cap_cost(RouteState((0, 1, 0), tsptw([(0, 0), (1, 0)], [(0, 1)])))


def test_objective_examples():
    inst = cvrp([(0, 0), (0, 1), (1, 1)], [1, 1])
    state = RouteState((0, 1, 2, 0), inst)
    tgt, costs, obj = objective(state)
    assert costs == (0.0,) and obj == tgt == total_distance(state)
    # 3.0 travel, 0.5 waiting, no violation
    inst = tsptw([(0, 0), (1.5, 0)], [(2.0, 5.0)])
    tgt, costs, obj = objective(RouteState((0, 1, 0), inst))
    assert tgt == pytest.approx(3.5) and obj == pytest.approx(3.5)


def test_cvrptw_objective_adds_both_costs():
    inst = generate_instance(Variant.CVRPTW, 12, capacity=10, seed=4)
    rng = np.random.default_rng(0)
    state = initial_route(inst)
    for _ in range(30):
        i, j = sorted(rng.choice(np.arange(1, len(state.sequence) - 1), 2, replace=False))
        state = swap_sequence(state, SwapAction(i, j))
    ev = evaluate(state)
    assert ev.obj == pytest.approx(ev.target + ev.capacity + ev.lateness, abs=1e-12)


def test_swap_example_and_involution():
    inst = cvrp([(0, 0)] + [(0.1 * i, 0.2) for i in range(1, 6)], [1] * 5, vehicles=2)
    state = RouteState((0, 1, 2, 3, 0, 4, 5, 0), inst)
    nxt, sig1 = apply_swap(state, SwapAction.of(5, 2))
    assert nxt.sequence == (0, 1, 4, 3, 0, 2, 5, 0)
    back, sig2 = apply_swap(nxt, SwapAction(2, 5))
    assert back.sequence == state.sequence
    assert sig1.reward + sig2.reward == pytest.approx(0.0, abs=1e-12)


def test_illegal_swaps():
    inst = cvrp([(0, 0), (0.1, 0), (0.2, 0)], [1, 1])
    state = RouteState((0, 1, 2, 0), inst)
    with pytest.raises(ActionError):
        SwapAction.of(1, 1)
    for bad in (SwapAction(0, 1), SwapAction(1, 3)):
        with pytest.raises(ActionError):
            apply_swap(state, bad)


@pytest.mark.parametrize("nc,nv,count", [(3, 2, 6), (1, 1, 0), (20, 1, 190)])
def test_action_counts(nc, nv, count):
    inst = cvrp([(0, 0)] + [(0.01 * i, 0) for i in range(1, nc + 1)], [1] * nc, vehicles=nv)
    state = RouteState((0,) + tuple(range(1, nc + 1)) + (0,) * nv, inst)
    assert len(enumerate_actions(state)) == count


def test_state_validation():
    inst = cvrp([(0, 0), (0.1, 0), (0.2, 0)], [1, 1], vehicles=1)
    for seq in [(1, 0, 2, 0), (0, 1, 1, 0), (0, 1, 0, 2, 0), (0, 1, 0)]:
        with pytest.raises(InstanceValidationError):
            RouteState(seq, inst)
    assert str(RouteState((0, 2, 1, 0), inst)) == "0-2-1-0"


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), variant=st.sampled_from(list(Variant)), swaps=st.lists(
    st.tuples(st.integers(0, 1000), st.integers(0, 1000)), max_size=20))
def test_swaps_preserve_multiset_and_evaluators_are_pure(seed, variant, swaps):
    inst = generate_instance(variant, 6, seed=seed)
    state = initial_route(inst)
    before = sorted(state.sequence)
    L = state.num_interior
    for a, b in swaps:
        i, j = 1 + a % L, 1 + b % L
        if i != j:
            state = swap_sequence(state, SwapAction.of(i, j))
    assert sorted(state.sequence) == before
    fresh = RouteState(state.sequence, state.instance)
    assert evaluate(fresh) == evaluate(RouteState(state.sequence, state.instance))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), variant=st.sampled_from(list(Variant)),
       form=st.sampled_from(["conventional", "literal"]), double=st.booleans())
def test_batch_evaluator_agrees_with_scalar(seed, variant, form, double):
    cfg = EnvConfig(form, double)
    inst = generate_instance(variant, 9, capacity=12 if variant.capacitated else None, seed=seed)
    state = initial_route(inst)
    rng = np.random.default_rng(seed)
    seqs = np.array([rng.permutation(state.sequence[1:-1]) for _ in range(6)])
    seqs = np.hstack([np.zeros((6, 1), int), seqs, np.zeros((6, 1), int)])
    batch = BatchEvaluator(state.instance, cfg)(seqs, with_details=True)
    for k, seq in enumerate(seqs):
        ev = evaluate(RouteState(tuple(seq), state.instance), cfg)
        assert batch.travel[k] == pytest.approx(ev.travel, abs=1e-12)
        assert batch.target[k] == pytest.approx(ev.target, abs=1e-12)
        assert batch.costs[k] == pytest.approx(ev.costs, abs=1e-12)
        assert batch.obj[k] == pytest.approx(ev.obj, abs=1e-12)
        if variant.timed:
            assert batch.arrival[k] == pytest.approx(arrival_times(RouteState(tuple(seq), state.instance)), abs=1e-12)
