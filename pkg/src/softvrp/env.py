"""Route states, 2-exchange moves and the target/cost evaluators.

A state is one sequence of node ids that starts and ends at the depot and
holds one interior depot token per extra vehicle, e.g. ``0-1-2-3-0-4-5-0``.
Everything here is a plain-Python reference implementation; the vectorized
twin used by rollouts lives in :mod:`softvrp.fastenv`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

from .errors import ActionError, InstanceValidationError, UnsupportedVariantError
from .instance import ProblemInstance, Variant

CONVENTIONAL = "conventional"
LITERAL = "literal"


@dataclass(frozen=True)
class EnvConfig:
    """Evaluator switches.

    ``tw_cost_form="literal"`` evaluates the window terms with the max()
    arguments in the order they are printed in the source formula (which
    penalizes in-window arrivals); ``"conventional"`` charges earliness
    ``max(tw_start - arrival, 0)`` and lateness ``max(arrival - tw_end, 0)``.
    Earliness equals waiting time under the conventional form, so it only
    enters the cost when ``double_count_earliness`` is set.
    """

    tw_cost_form: str = CONVENTIONAL
    double_count_earliness: bool = False

    def __post_init__(self):
        if self.tw_cost_form not in (CONVENTIONAL, LITERAL):
            raise ValueError(f"tw_cost_form must be 'conventional' or 'literal', got {self.tw_cost_form!r}")


DEFAULT_ENV = EnvConfig()


def cost_names(variant: Variant) -> tuple[str, ...]:
    return {
        Variant.CVRP: ("capacity",),
        Variant.TSPTW: ("time_window",),
        Variant.CVRPTW: ("capacity", "time_window"),
    }[Variant.parse(variant)]


@dataclass(frozen=True)
class SwapAction:
    """Exchange the tokens at sequence positions ``i < j``."""

    i: int
    j: int

    @classmethod
    def of(cls, a: int, b: int) -> "SwapAction":
        if a == b:
            raise ActionError(f"cannot swap position {a} with itself")
        return cls(min(a, b), max(a, b))


@dataclass(frozen=True)
class StepSignal:
    """Reward (target reduction) and per-constraint cost change of one move.

    ``costs[c]`` is ``cost_c(next) - cost_c(state)``: positive when the move
    adds violation, so the penalized return ``r - lambda * (c - eps)``
    punishes it.
    """

    reward: float
    costs: tuple[float, ...]


@dataclass(frozen=True)
class Evaluation:
    travel: float
    waiting: float
    capacity: float
    earliness: float
    lateness: float
    target: float
    costs: tuple[float, ...]

    @property
    def obj(self) -> float:
        return self.target + sum(self.costs)


@dataclass(frozen=True)
class RouteState:
    sequence: tuple[int, ...]
    instance: ProblemInstance = field(repr=False, compare=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False, hash=False)

    def __post_init__(self):
        seq = tuple(int(x) for x in self.sequence)
        object.__setattr__(self, "sequence", seq)
        inst = self.instance
        if len(seq) < 2 or seq[0] != 0 or seq[-1] != 0:
            raise InstanceValidationError(f"route must start and end at the depot: {self}")
        customers = sorted(x for x in seq if x != 0)
        if customers != list(range(1, inst.num_customers + 1)):
            raise InstanceValidationError(f"every customer must appear exactly once: {self}")
        depots = len(seq) - len(customers)
        if inst.num_vehicles is not None and depots != inst.num_vehicles + 1:
            raise InstanceValidationError(
                f"expected {inst.num_vehicles + 1} depot tokens, found {depots}: {self}"
            )

    def __str__(self):
        return "-".join(map(str, self.sequence))

    @property
    def num_interior(self) -> int:
        return len(self.sequence) - 2

    @property
    def num_vehicles(self) -> int:
        return self.sequence.count(0) - 1

    def routes(self) -> list[list[int]]:
        """Customer lists per vehicle (possibly empty)."""
        out, cur = [], []
        for node in self.sequence[1:]:
            if node == 0:
                out.append(cur)
                cur = []
            else:
                cur.append(node)
        return out


def make_state(instance: ProblemInstance, sequence) -> RouteState:
    return RouteState(tuple(sequence), instance)


# -- evaluators --------------------------------------------------------------

def total_distance(state: RouteState) -> float:
    nodes = state.instance.nodes
    seq = state.sequence
    total = 0.0
    for a, b in zip(seq, seq[1:]):
        total += math.hypot(nodes[a].x - nodes[b].x, nodes[a].y - nodes[b].y)
    return total


def _require_timed(state: RouteState) -> None:
    if not state.instance.variant.timed:
        raise UnsupportedVariantError(f"{state.instance.variant.value} has no time windows")


def _require_capacitated(state: RouteState) -> None:
    if not state.instance.variant.capacitated:
        raise UnsupportedVariantError(f"{state.instance.variant.value} has no capacity constraint")


def _timeline(state: RouteState) -> tuple[list[float], list[float]]:
    """Arrival and departure time at every sequence position.

    Travel time equals Euclidean distance. Each vehicle's clock starts at 0 on
    its depot token and it waits at a customer until the window opens.
    An interior depot token reports the arrival of the vehicle returning there.
    """
    nodes = state.instance.nodes
    seq = state.sequence
    arrival = [0.0] * len(seq)
    departure = [0.0] * len(seq)
    clock = 0.0
    for k in range(1, len(seq)):
        a, b = nodes[seq[k - 1]], nodes[seq[k]]
        arr = clock + math.hypot(a.x - b.x, a.y - b.y)
        arrival[k] = arr
        if seq[k] == 0:
            clock = 0.0
        else:
            clock = max(arr, b.tw_start)
        departure[k] = clock
    return arrival, departure


def arrival_times(state: RouteState) -> list[float]:
    _require_timed(state)
    return _timeline(state)[0]


def waiting_time(state: RouteState) -> float:
    _require_timed(state)
    arrival, departure = _timeline(state)
    return sum(d - a for node, a, d in zip(state.sequence, arrival, departure) if node != 0)


def tw_terms(state: RouteState, form: str = CONVENTIONAL) -> tuple[float, float]:
    """(earliness, lateness) summed over customers of all vehicles."""
    _require_timed(state)
    nodes = state.instance.nodes
    arrival, _ = _timeline(state)
    early = late = 0.0
    for node_id, arr in zip(state.sequence, arrival):
        if node_id == 0:
            continue
        n = nodes[node_id]
        if form == LITERAL:
            early += max(arr - n.tw_start, 0.0)
            late += max(n.tw_end - arr, 0.0)
        else:
            early += max(n.tw_start - arr, 0.0)
            late += max(arr - n.tw_end, 0.0)
    return early, late


def tw_cost(state: RouteState, form: str = CONVENTIONAL) -> float:
    early, late = tw_terms(state, form)
    return early + late


def cap_cost(state: RouteState) -> float:
    _require_capacitated(state)
    inst = state.instance
    cap = float(inst.capacity)
    total = 0.0
    for route in state.routes():
        load = sum(inst.nodes[c].demand for c in route)
        total += max(0.0, (load - cap) / cap)
    return total


def evaluate(state: RouteState, config: EnvConfig = DEFAULT_ENV) -> Evaluation:
    """Target and cost decomposition; memoized per state and config."""
    hit = state._cache.get(config)
    if hit is not None:
        return hit
    variant = state.instance.variant
    travel = total_distance(state)
    waiting = capacity = early = late = 0.0
    costs = []
    if variant.capacitated:
        capacity = cap_cost(state)
        costs.append(capacity)
    if variant.timed:
        waiting = waiting_time(state)
        early, late = tw_terms(state, config.tw_cost_form)
        if config.tw_cost_form == CONVENTIONAL and not config.double_count_earliness:
            early = 0.0
        costs.append(early + late)
    result = Evaluation(travel, waiting, capacity, early, late, travel + waiting, tuple(costs))
    state._cache[config] = result
    return result


def objective(state: RouteState, config: EnvConfig = DEFAULT_ENV) -> tuple[float, tuple[float, ...], float]:
    """``(target, cost_vector, obj)`` with ``obj = target + sum(costs)``."""
    ev = evaluate(state, config)
    return ev.target, ev.costs, ev.obj


# -- moves -------------------------------------------------------------------

def check_action(state: RouteState, action: SwapAction) -> None:
    last = len(state.sequence) - 2
    if not (1 <= action.i < action.j <= last):
        raise ActionError(f"swap ({action.i}, {action.j}) outside interior positions 1..{last}")


def swap_sequence(state: RouteState, action: SwapAction) -> RouteState:
    check_action(state, action)
    seq = list(state.sequence)
    seq[action.i], seq[action.j] = seq[action.j], seq[action.i]
    return RouteState(tuple(seq), state.instance)


def apply_swap(
    state: RouteState, action: SwapAction, config: EnvConfig = DEFAULT_ENV
) -> tuple[RouteState, StepSignal]:
    nxt = swap_sequence(state, action)
    before, after = evaluate(state, config), evaluate(nxt, config)
    reward = before.target - after.target
    costs = tuple(post - pre for pre, post in zip(before.costs, after.costs))
    return nxt, StepSignal(reward, costs)


def enumerate_actions(state: RouteState) -> list[SwapAction]:
    return [SwapAction(i, j) for i, j in combinations(range(1, len(state.sequence) - 1), 2)]
