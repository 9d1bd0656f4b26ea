"""Vectorized evaluation of many route sequences of one instance.

Rollouts keep sequences as rows of an ``(n, S)`` integer array and evaluate
candidate moves in bulk. Results must agree with :mod:`softvrp.env`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import CONVENTIONAL, DEFAULT_ENV, EnvConfig
from .instance import ProblemInstance


@dataclass
class BatchEval:
    travel: np.ndarray
    waiting: np.ndarray
    capacity: np.ndarray
    earliness: np.ndarray
    lateness: np.ndarray
    target: np.ndarray
    costs: np.ndarray  # (n, C)
    arrival: np.ndarray | None = None  # (n, S), timed variants only
    loads: np.ndarray | None = None  # (n, S) load of the route holding each position

    @property
    def obj(self) -> np.ndarray:
        return self.target + self.costs.sum(axis=1)

    def take(self, idx) -> "BatchEval":
        pick = lambda a: None if a is None else a[idx]
        return BatchEval(*(pick(getattr(self, f)) for f in self.__dataclass_fields__))

    def put(self, idx, other: "BatchEval") -> None:
        for f in self.__dataclass_fields__:
            mine = getattr(self, f)
            if mine is not None:
                mine[idx] = getattr(other, f)

    def copy(self) -> "BatchEval":
        return BatchEval(*(None if getattr(self, f) is None else getattr(self, f).copy()
                           for f in self.__dataclass_fields__))


class BatchEvaluator:
    def __init__(self, instance: ProblemInstance, config: EnvConfig = DEFAULT_ENV):
        self.instance = instance
        self.config = config
        self.variant = instance.variant
        self.dist = instance.distance_matrix
        self.demand = instance.demands
        self.tw_start = instance.tw_start
        self.tw_end = instance.tw_end
        self.cap = float(instance.capacity) if instance.variant.capacitated else 1.0
        self.num_costs = int(instance.variant.capacitated) + int(instance.variant.timed)

    def __call__(self, seqs: np.ndarray, with_details: bool = False) -> BatchEval:
        seqs = np.asarray(seqs)
        n, S = seqs.shape
        rows = np.arange(n)
        leg = self.dist[seqs[:, :-1], seqs[:, 1:]]
        travel = leg.sum(axis=1)
        zeros = np.zeros(n)
        costs = []
        capacity, waiting, early, late = (np.zeros(n) for _ in range(4))
        loads = arrival = None

        is_depot = seqs == 0
        if self.variant.capacitated or with_details:
            cum = np.cumsum(self.demand[seqs], axis=1)
            nd = int(is_depot[0].sum())
            dpos = np.nonzero(is_depot)[1].reshape(n, nd)
            route_load = cum[rows[:, None], dpos[:, 1:]] - cum[rows[:, None], dpos[:, :-1]]
            if self.variant.capacitated:
                capacity = np.maximum(route_load - self.cap, 0.0).sum(axis=1) / self.cap
                costs.append(capacity)
            if with_details:
                vehicle = np.cumsum(is_depot, axis=1) - 1
                vehicle = np.minimum(vehicle, nd - 2)
                loads = np.where(is_depot, 0.0, route_load[rows[:, None], vehicle])

        if self.variant.timed:
            arrival = np.zeros((n, S))
            clock = zeros.copy()
            waiting = zeros.copy()
            early = zeros.copy()
            late = zeros.copy()
            literal = self.config.tw_cost_form != CONVENTIONAL
            for k in range(1, S):
                node = seqs[:, k]
                arr = clock + leg[:, k - 1]
                arrival[:, k] = arr
                start = self.tw_start[node]
                dep = np.maximum(arr, start)
                waiting += dep - arr  # zero at the depot (window opens at 0)
                cust = node != 0
                if literal:
                    early += np.where(cust, np.maximum(arr - start, 0.0), 0.0)
                    late += np.where(cust, np.maximum(self.tw_end[node] - arr, 0.0), 0.0)
                else:
                    late += np.maximum(arr - self.tw_end[node], 0.0)
                clock = np.where(cust, dep, 0.0)
            if not literal:
                early = waiting.copy() if self.config.double_count_earliness else np.zeros(n)
            costs.append(early + late)

        costs_arr = np.stack(costs, axis=1) if costs else np.zeros((n, 0))
        return BatchEval(
            travel=travel,
            waiting=waiting,
            capacity=capacity,
            earliness=early,
            lateness=late,
            target=travel + waiting,
            costs=costs_arr,
            arrival=arrival,
            loads=loads,
        )
