"""Nearest-neighbor construction of the starting route."""

from __future__ import annotations

import math

from .env import RouteState
from .errors import InfeasibleInstanceError, UnsupportedVariantError
from .instance import ProblemInstance, Variant


def _by_distance(instance: ProblemInstance, origin: int, candidates) -> list[int]:
    # ties fall to the lower node id
    o = instance.nodes[origin]
    return sorted(candidates, key=lambda k: (math.hypot(instance.nodes[k].x - o.x, instance.nodes[k].y - o.y), k))


def initial_route_capacitated(instance: ProblemInstance) -> RouteState:
    """Greedy capacity-feasible route; the depot competes as a candidate.

    From the last visited node take the nearest pending candidate. The depot is
    always pending: if it is nearest while the vehicle is out, the vehicle
    goes home early. If the nearest customer does not fit the remaining load,
    the vehicle also goes home and a fresh one starts. The returned state's
    instance has ``num_vehicles`` set to the number of routes built.
    """
    if not instance.variant.capacitated:
        raise UnsupportedVariantError("capacitated initializer needs a capacity")
    cap = float(instance.capacity)
    demands = [n.demand for n in instance.nodes]
    worst = max(demands[1:], default=0.0)
    if worst > cap:
        raise InfeasibleInstanceError(f"a customer demands {worst} > capacity {cap}")

    route = [0]
    pending = set(range(1, instance.num_customers + 1))
    remaining = cap
    while pending:
        prev = route[-1]
        for node in _by_distance(instance, prev, pending | {0}):
            if node == 0:
                if prev != 0:
                    route.append(0)
                    remaining = cap
                    break
                continue
            if demands[node] > remaining:
                route.append(0)
                remaining = cap
                break
            route.append(node)
            remaining -= demands[node]
            pending.discard(node)
            break
    route.append(0)
    vehicles = route.count(0) - 1
    return RouteState(tuple(route), instance.with_vehicles(vehicles))


def initial_route_tsptw(instance: ProblemInstance) -> RouteState:
    """Single-vehicle nearest-neighbor tour; time windows are ignored."""
    if instance.variant is not Variant.TSPTW:
        raise UnsupportedVariantError("tsptw initializer called on a capacitated variant")
    route = [0]
    pending = set(range(1, instance.num_customers + 1))
    while pending:
        nxt = _by_distance(instance, route[-1], pending)[0]
        route.append(nxt)
        pending.discard(nxt)
    route.append(0)
    return RouteState(tuple(route), instance.with_vehicles(1))


def initial_route(instance: ProblemInstance) -> RouteState:
    """Starting state for any variant.

    When a capacitated instance already fixes a larger fleet than the
    initializer needs, the spare vehicles are appended as empty routes.
    """
    if instance.variant is Variant.TSPTW:
        return initial_route_tsptw(instance)
    state = initial_route_capacitated(instance)
    fixed = instance.num_vehicles
    if fixed is None:
        return state
    if state.num_vehicles > fixed:
        raise InfeasibleInstanceError(
            f"instance fixes {fixed} vehicles but the initializer needs {state.num_vehicles}"
        )
    return RouteState(state.sequence + (0,) * (fixed - state.num_vehicles), instance)
