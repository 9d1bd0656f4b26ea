"""Problem instances for CVRP, TSPTW and CVRPTW: generation and JSON I/O."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, InstanceParseError, InstanceValidationError


class Variant(str, enum.Enum):
    CVRP = "cvrp"
    TSPTW = "tsptw"
    CVRPTW = "cvrptw"

    @property
    def capacitated(self) -> bool:
        return self is not Variant.TSPTW

    @property
    def timed(self) -> bool:
        return self is not Variant.CVRP

    @classmethod
    def parse(cls, value: "str | Variant") -> "Variant":
        if isinstance(value, Variant):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown variant {value!r}") from None


@dataclass(frozen=True)
class Node:
    id: int
    x: float
    y: float
    demand: float = 0.0
    tw_start: float | None = None
    tw_end: float | None = None

    @property
    def has_window(self) -> bool:
        return self.tw_start is not None


# Capacities used for the standard benchmark sizes; smaller sizes use the N=20 value.
DEFAULT_CAPACITY = {20: 30, 50: 40, 100: 50}


def default_capacity(num_customers: int) -> int:
    if num_customers <= 20:
        return 30
    if num_customers <= 50:
        return 40
    return 50


@dataclass(frozen=True)
class ProblemInstance:
    """Immutable problem definition; node 0 is the depot.

    ``num_vehicles`` is ``None`` for a capacitated instance whose fleet size
    has not been fixed by the initial solution yet.
    """

    variant: Variant
    nodes: tuple[Node, ...]
    capacity: float | None = None
    num_vehicles: int | None = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        object.__setattr__(self, "nodes", tuple(self.nodes))
        self.validate()

    @property
    def num_customers(self) -> int:
        return len(self.nodes) - 1

    def validate(self) -> None:
        v = self.variant
        if len(self.nodes) < 1:
            raise InstanceValidationError("instance has no depot")
        for k, n in enumerate(self.nodes):
            if n.id != k:
                raise InstanceValidationError(f"node ids must be 0..N without gaps (found {n.id} at {k})")
            if not (math.isfinite(n.x) and math.isfinite(n.y)):
                raise InstanceValidationError(f"node {k}: non-finite coordinates")
            if n.demand < 0 or not math.isfinite(n.demand):
                raise InstanceValidationError(f"node {k}: demand must be finite and non-negative")
            if v.timed:
                if n.tw_start is None or n.tw_end is None:
                    raise InstanceValidationError(f"node {k}: {v.value} requires tw_start and tw_end")
                if n.tw_start > n.tw_end:
                    raise InstanceValidationError(f"node {k}: tw_start > tw_end")
            elif n.tw_start is not None or n.tw_end is not None:
                raise InstanceValidationError(f"node {k}: cvrp nodes must not carry time windows")
        if self.nodes[0].demand != 0:
            raise InstanceValidationError("depot demand must be 0")
        if v is Variant.TSPTW:
            if self.num_vehicles not in (None, 1):
                raise InstanceValidationError("tsptw uses exactly one vehicle")
            if any(n.demand != 0 for n in self.nodes):
                raise InstanceValidationError("tsptw demands must all be 0")
            if self.num_vehicles is None:
                object.__setattr__(self, "num_vehicles", 1)
        else:
            if self.capacity is None:
                raise InstanceValidationError(f"{v.value} requires a capacity")
            if not self.capacity > 0:
                raise InstanceValidationError("capacity must be positive")
            if self.num_customers and self.capacity < max(n.demand for n in self.nodes[1:]):
                raise InstanceValidationError("capacity is below the largest customer demand")
        if self.num_vehicles is not None and self.num_vehicles < 1:
            raise InstanceValidationError("num_vehicles must be a positive integer")

    def with_vehicles(self, num_vehicles: int) -> "ProblemInstance":
        return replace(self, num_vehicles=int(num_vehicles))

    # Array views used by the evaluators; computed once per instance.
    @cached_property
    def coords(self) -> np.ndarray:
        return np.array([[n.x, n.y] for n in self.nodes], dtype=float)

    @cached_property
    def demands(self) -> np.ndarray:
        return np.array([n.demand for n in self.nodes], dtype=float)

    @cached_property
    def tw_start(self) -> np.ndarray:
        return np.array([n.tw_start if n.tw_start is not None else 0.0 for n in self.nodes])

    @cached_property
    def tw_end(self) -> np.ndarray:
        return np.array([n.tw_end if n.tw_end is not None else math.inf for n in self.nodes])

    @cached_property
    def distance_matrix(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff**2).sum(-1))

    @cached_property
    def reward_bound(self) -> float:
        """Twice the sum of all pairwise distances; bounds any single-step reward."""
        return float(self.distance_matrix.sum())  # symmetric matrix already counts each pair twice


def _seed_to_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)


def generate_instance(
    variant: "Variant | str",
    num_customers: int,
    capacity: float | None = None,
    seed: int = 0,
) -> ProblemInstance:
    """Draw a random instance; deterministic in its arguments.

    Coordinates are uniform on the unit square, demands uniform on {1..9}.
    Time windows are centered at ``dist(depot, i) * u`` with ``u ~ U[1, 2]``
    and have width ``w ~ U[0.2, 1.0]``. The depot window is ``[0, inf)``.
    Capacitated instances get their fleet size from the nearest-neighbor
    initial solution.
    """
    variant = Variant.parse(variant)
    if num_customers < 1:
        raise ConfigError("num_customers must be >= 1")
    if variant.capacitated:
        capacity = default_capacity(num_customers) if capacity is None else capacity
        if not capacity > 0:
            raise ConfigError(f"capacity must be positive, got {capacity}")
    else:
        capacity = None

    rng = _seed_to_rng(seed)
    xy = rng.random((num_customers + 1, 2))
    if variant.capacitated:
        demand = np.concatenate([[0], rng.integers(1, 10, size=num_customers)]).astype(float)
        if capacity < demand.max():
            raise ConfigError(f"capacity {capacity} is below the maximum demand 9")
    else:
        demand = np.zeros(num_customers + 1)

    windows = [(None, None)] * (num_customers + 1)
    if variant.timed:
        depot_dist = np.hypot(*(xy[1:] - xy[0]).T)
        center = depot_dist * rng.uniform(1.0, 2.0, size=num_customers)
        width = rng.uniform(0.2, 1.0, size=num_customers)
        windows = [(0.0, math.inf)] + [
            (max(0.0, float(c - w / 2)), float(c + w / 2)) for c, w in zip(center, width)
        ]

    nodes = tuple(
        Node(k, float(xy[k, 0]), float(xy[k, 1]), float(demand[k]), *windows[k])
        for k in range(num_customers + 1)
    )
    inst = ProblemInstance(variant, nodes, capacity=capacity, name=f"{variant.value}-{num_customers}-{seed}")
    if variant.capacitated:
        from .init_solution import initial_route_capacitated

        inst = initial_route_capacitated(inst).instance
    return inst


def generate_dataset(variant, num_customers, count, capacity=None, seed=0) -> list[ProblemInstance]:
    """``count`` instances with per-instance seeds drawn from ``seed``."""
    seeds = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF).generate_state(count, dtype=np.uint64)
    return [generate_instance(variant, num_customers, capacity, int(s)) for s in seeds]


# -- serialization -----------------------------------------------------------

def _num(x: float | None):
    if x is None:
        return None
    if math.isinf(x):
        return None  # unbounded window end
    return float(x)


def instance_to_dict(inst: ProblemInstance) -> dict:
    nodes = []
    for n in inst.nodes:
        row = {"id": n.id, "x": n.x, "y": n.y, "demand": n.demand}
        if n.has_window:
            row["tw_start"] = _num(n.tw_start)
            row["tw_end"] = _num(n.tw_end)
        nodes.append(row)
    return {
        "variant": inst.variant.value,
        "capacity": inst.capacity,
        "num_vehicles": inst.num_vehicles,
        "nodes": nodes,
    }


def _get(obj: dict, key: str, where: str, kind=(int, float), required: bool = True):
    if key not in obj:
        if required:
            raise InstanceParseError(f"{where}{key}", "missing")
        return None
    value = obj[key]
    if value is not None and (isinstance(value, bool) or not isinstance(value, kind)):
        raise InstanceParseError(f"{where}{key}", f"expected number, got {type(value).__name__}")
    return value


def instance_from_dict(data: dict) -> ProblemInstance:
    if not isinstance(data, dict):
        raise InstanceParseError("<root>", "expected a JSON object")
    if "variant" not in data:
        raise InstanceParseError("variant", "missing")
    try:
        variant = Variant(str(data["variant"]).lower())
    except ValueError:
        raise InstanceParseError("variant", f"unknown variant {data['variant']!r}") from None
    raw_nodes = data.get("nodes")
    if not isinstance(raw_nodes, list) or not raw_nodes:
        raise InstanceParseError("nodes", "expected a non-empty list")
    capacity = _get(data, "capacity", "", required=False)
    if variant.capacitated and capacity is None:
        raise InstanceValidationError(f"{variant.value} instance is missing 'capacity'")
    num_vehicles = _get(data, "num_vehicles", "", kind=int, required=False)

    nodes = []
    for k, raw in enumerate(raw_nodes):
        where = f"nodes[{k}]."
        if not isinstance(raw, dict):
            raise InstanceParseError(f"nodes[{k}]", "expected an object")
        node_id = _get(raw, "id", where, kind=int)
        x = _get(raw, "x", where)
        y = _get(raw, "y", where)
        demand = _get(raw, "demand", where, required=False) or 0.0
        has_tw = "tw_start" in raw or "tw_end" in raw
        tw_start = tw_end = None
        if has_tw:
            if not variant.timed:
                raise InstanceValidationError(f"node {node_id}: cvrp nodes must not carry time windows")
            tw_start = _get(raw, "tw_start", where)
            tw_end = _get(raw, "tw_end", where)
            tw_start = 0.0 if tw_start is None else float(tw_start)
            tw_end = math.inf if tw_end is None else float(tw_end)
        nodes.append(Node(node_id, float(x), float(y), float(demand), tw_start, tw_end))
    return ProblemInstance(variant, tuple(nodes), capacity=capacity, num_vehicles=num_vehicles)


def dumps_instance(inst: ProblemInstance) -> str:
    # repr-based float output is the shortest exact round-trip form (up to 17 digits)
    return json.dumps(instance_to_dict(inst), indent=1, allow_nan=False)


def save_instance(inst: ProblemInstance, path: "str | Path") -> None:
    Path(path).write_text(dumps_instance(inst) + "\n")


def load_instance(path: "str | Path") -> ProblemInstance:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceParseError("<root>", f"invalid JSON ({exc})") from None
    return instance_from_dict(data)
