"""Rollouts, trajectory shaping and the constrained cumulative reward.

A rollout starts from the nearest-neighbor solution and applies one swap per
step. With shaping enabled each proposed swap is accepted or rejected by
:func:`shaping_filter`; a rejected proposal is redrawn from the same state,
and after ``resample_cap`` draws the last one is kept regardless.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .env import DEFAULT_ENV, EnvConfig, RouteState, StepSignal, SwapAction, cost_names, evaluate
from .errors import ContractError
from .fastenv import BatchEval, BatchEvaluator
from .init_solution import initial_route
from .instance import ProblemInstance

EQUATION = "equation"
PROSE = "prose"

MAX_WINDOW = "max_window"
MAX_WINDOW_CAPTION = "max_window_caption"
DISCOUNTED_SUM = "discounted_sum"
RETURN_FORMS = (MAX_WINDOW, MAX_WINDOW_CAPTION, DISCOUNTED_SUM)

RESAMPLE_CAP = 50


# -- returns -----------------------------------------------------------------

@dataclass(frozen=True)
class ReturnConfig:
    """Decay, multipliers and thresholds used to score a trajectory.

    ``form`` selects the max-over-windows return with exponent ``t' - t``
    (default), the same with exponent ``t' - t - 1``, or the ordinary
    discounted sum of penalized rewards.
    """

    gamma: float = 0.9
    lambdas: tuple[float, ...] = (1.0,)
    epsilons: tuple[float, ...] = (0.0,)
    form: str = MAX_WINDOW

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        object.__setattr__(self, "epsilons", tuple(float(x) for x in self.epsilons))
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if len(self.lambdas) != len(self.epsilons):
            raise ValueError("lambdas and epsilons must have equal length")
        if any(x < 0 for x in self.lambdas) or any(x < 0 for x in self.epsilons):
            raise ValueError("lambdas and epsilons must be non-negative")
        if self.form not in RETURN_FORMS:
            raise ValueError(f"unknown return form {self.form!r}")


@dataclass(frozen=True)
class Returns:
    """Per-step returns with the settings they were computed under."""

    values: np.ndarray  # (T,)
    t_tilde: np.ndarray  # (T,) maximizing window end; T-1 for the discounted sum
    config: ReturnConfig


def penalized_rewards(rewards, costs, config: ReturnConfig) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64).reshape(len(rewards), -1)
    if costs.shape[1] != len(config.lambdas):
        raise ValueError(f"{costs.shape[1]} cost columns but {len(config.lambdas)} multipliers")
    lam = np.asarray(config.lambdas)
    eps = np.asarray(config.epsilons)
    return rewards - ((costs - eps) * lam).sum(axis=1)


def _exponent_offset(form: str) -> int:
    return -1 if form == MAX_WINDOW_CAPTION else 0


def compute_returns(rewards, costs, config: ReturnConfig) -> Returns:
    """Returns for every start index of one trajectory.

    For the window forms ``G_t = max_{t' >= t} gamma^(t'-t) * sum_{i=t}^{t'} x_i``
    with ``x_i = r_i - sum_c lambda_c (c_ic - eps_c)``; ties resolve to the
    smallest ``t'``.
    """
    x = penalized_rewards(rewards, costs, config)
    T = len(x)
    if T == 0:
        return Returns(np.zeros(0), np.zeros(0, dtype=np.int64), config)
    span = np.arange(T)[None, :] - np.arange(T)[:, None]  # t' - t
    upper = span >= 0
    if config.form == DISCOUNTED_SUM:
        weights = np.where(upper, np.power(config.gamma, np.maximum(span, 0)), 0.0)
        return Returns(weights @ x, np.full(T, T - 1, dtype=np.int64), config)
    # Row t accumulates x_t, x_{t+1}, ... left to right (zeros before t add exactly 0).
    windows = np.cumsum(np.where(upper, x[None, :], 0.0), axis=1)
    expo = span + _exponent_offset(config.form)
    scored = np.where(upper, np.power(config.gamma, expo.astype(np.float64)) * windows, -np.inf)
    t_tilde = np.argmax(scored, axis=1)
    return Returns(scored[np.arange(T), t_tilde], t_tilde.astype(np.int64), config)


def constrained_return(traj: "Trajectory", t: int, config: ReturnConfig) -> tuple[float, int]:
    """``(G_t, t_tilde)`` for one start index of a recorded trajectory."""
    T = len(traj.transitions)
    if not 0 <= t < T:
        raise IndexError(f"t={t} outside 0..{T - 1}")
    ret = compute_returns(traj.rewards, traj.costs, config)
    return float(ret.values[t]), int(ret.t_tilde[t])


def lambda_gradient_from(returns: Returns, costs, t: int | None = None,
                         lambdas=None) -> np.ndarray:
    """Derivative of the return w.r.t. each multiplier.

    ``-gamma^(t~-t) * sum_{i=t}^{t~} (c_i - eps)`` per constraint (window
    forms) or ``-sum_i gamma^(i-t) (c_i - eps)`` (discounted sum). With
    ``t=None`` the mean over all start indices is returned. ``lambdas``, when
    given, must equal the multipliers the returns were computed with.
    """
    cfg = returns.config
    if lambdas is not None and tuple(float(x) for x in lambdas) != cfg.lambdas:
        raise ContractError(
            f"returns were computed with lambdas {cfg.lambdas}, not {tuple(lambdas)}"
        )
    costs = np.asarray(costs, dtype=np.float64)
    T = len(returns.values)
    costs = costs.reshape(T, -1)
    excess = costs - np.asarray(cfg.epsilons)
    starts = range(T) if t is None else [t]
    grads = []
    for s in starts:
        if not 0 <= s < T:
            raise IndexError(f"t={s} outside 0..{T - 1}")
        if cfg.form == DISCOUNTED_SUM:
            w = np.power(cfg.gamma, np.arange(T - s, dtype=np.float64))
            grads.append(-(w[:, None] * excess[s:]).sum(axis=0))
        else:
            end = int(returns.t_tilde[s])
            expo = end - s + _exponent_offset(cfg.form)
            grads.append(-(cfg.gamma**expo) * excess[s:end + 1].sum(axis=0))
    if not grads:
        return np.zeros(costs.shape[1])
    return np.mean(grads, axis=0)


# -- shaping -----------------------------------------------------------------

def reject_probability(improved, phi: float, mode: str = EQUATION):
    """Rejection probability of a proposed move.

    ``"equation"``: phi if improved, 1 - phi otherwise.
    ``"prose"``: the two cases exchanged.
    """
    if mode == EQUATION:
        return np.where(improved, phi, 1.0 - phi)
    if mode == PROSE:
        return np.where(improved, 1.0 - phi, phi)
    raise ValueError(f"unknown shaping mode {mode!r}")


def shaping_filter(prev_state: RouteState, candidate_next: RouteState, phi: float,
                   rng: np.random.Generator, mode: str = EQUATION,
                   env_config: EnvConfig = DEFAULT_ENV) -> bool:
    """Accept or reject one candidate; improved means obj(prev) >= obj(next)."""
    if not 0.0 <= phi <= 1.0:
        raise ValueError(f"phi must lie in [0, 1], got {phi}")
    improved = evaluate(prev_state, env_config).obj >= evaluate(candidate_next, env_config).obj
    return bool(rng.random() >= reject_probability(improved, phi, mode))


# -- policies ----------------------------------------------------------------

class Policy(Protocol):
    def prepare(self, instance: ProblemInstance, seqs: np.ndarray, ev: BatchEval): ...

    def propose(self, ctx, rows: np.ndarray, k: int, rng: np.random.Generator
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]: ...


class RandomPolicy:
    """Uniform over ordered pairs of distinct interior positions."""

    def prepare(self, instance, seqs, ev):
        return seqs.shape[1] - 2

    def propose(self, ctx, rows, k, rng):
        L = ctx
        n = len(rows)
        first = rng.integers(L, size=(n, k))
        second = rng.integers(L - 1, size=(n, k))
        second += second >= first
        return first, second, np.full((n, k), -math.log(L * (L - 1)))


# -- trajectories ------------------------------------------------------------

@dataclass
class Transition:
    state: RouteState
    action: SwapAction
    reward: float
    costs: tuple[float, ...]
    log_prob: float
    chosen_q_index: int  # sequence position of the first node


@dataclass
class Trajectory:
    transitions: list[Transition]
    terminal_state: RouteState

    @property
    def rewards(self) -> np.ndarray:
        return np.array([tr.reward for tr in self.transitions], dtype=np.float64)

    @property
    def costs(self) -> np.ndarray:
        if not self.transitions:
            return np.zeros((0, len(cost_names(self.terminal_state.instance.variant))))
        return np.array([tr.costs for tr in self.transitions], dtype=np.float64)

    @property
    def states(self) -> list[RouteState]:
        return [tr.state for tr in self.transitions] + [self.terminal_state]

    def dump_jsonl(self, path: "str | Path") -> None:
        with open(path, "w") as fh:
            for t, tr in enumerate(self.transitions):
                fh.write(json.dumps({
                    "t": t,
                    "state": str(tr.state),
                    "action": [tr.action.i, tr.action.j],
                    "first": tr.chosen_q_index,
                    "reward": tr.reward,
                    "costs": list(tr.costs),
                    "log_prob": tr.log_prob,
                }) + "\n")


@dataclass
class RolloutBatch:
    """``B`` lock-step rollouts on one instance, stored as arrays.

    Positions in ``first``/``second`` are interior indices (sequence position - 1).
    """

    instance: ProblemInstance
    seqs: np.ndarray  # (T+1, B, S)
    first: np.ndarray  # (T, B)
    second: np.ndarray  # (T, B)
    rewards: np.ndarray  # (T, B)
    costs: np.ndarray  # (T, B, C) cost increase per step
    log_probs: np.ndarray  # (T, B)
    target: np.ndarray  # (T+1, B)
    cost_values: np.ndarray  # (T+1, B, C)
    attempts: np.ndarray  # (T, B) proposals drawn per step
    features: np.ndarray | None = None  # (T, B, L, F)

    @property
    def steps(self) -> int:
        return self.rewards.shape[0]

    @property
    def batch_size(self) -> int:
        return self.seqs.shape[1]

    @property
    def obj(self) -> np.ndarray:
        return self.target + self.cost_values.sum(axis=-1)

    def best_index(self) -> np.ndarray:
        """Per rollout, the step of the lowest objective (earliest on ties)."""
        return np.argmin(self.obj, axis=0)

    def to_trajectory(self, b: int = 0) -> Trajectory:
        inst = self.instance
        states = [RouteState(tuple(int(x) for x in self.seqs[t, b]), inst) for t in range(self.steps + 1)]
        trs = []
        for t in range(self.steps):
            i, j = int(self.first[t, b]) + 1, int(self.second[t, b]) + 1
            trs.append(Transition(states[t], SwapAction.of(i, j), float(self.rewards[t, b]),
                                  tuple(float(c) for c in self.costs[t, b]), float(self.log_probs[t, b]), i))
        return Trajectory(trs, states[-1])


def rollout_batch(instance: ProblemInstance, policy, batch_size: int, steps: int,
                  phi: float | None, rng: np.random.Generator, env_config: EnvConfig = DEFAULT_ENV,
                  shaping_mode: str = EQUATION, resample_cap: int = RESAMPLE_CAP, chunk: int = 10,
                  start: RouteState | None = None, keep_features: bool = False) -> RolloutBatch:
    """Run ``batch_size`` rollouts of ``steps`` moves from the initial solution.

    ``phi=None`` disables shaping (every proposal is accepted). Proposals for
    one state are drawn ``chunk`` at a time and scanned in draw order, which
    is equivalent to drawing them one by one.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    state0 = start if start is not None else initial_route(instance)
    inst = state0.instance
    evaluator = BatchEvaluator(inst, env_config)
    S = len(state0.sequence)
    L = S - 2
    B = batch_size
    if L < 2:
        steps = 0  # no legal swap exists
    C = evaluator.num_costs

    seqs = np.empty((steps + 1, B, S), dtype=np.int64)
    seqs[0] = np.asarray(state0.sequence)
    first = np.zeros((steps, B), dtype=np.int64)
    second = np.zeros((steps, B), dtype=np.int64)
    rewards = np.zeros((steps, B))
    costs = np.zeros((steps, B, C))
    log_probs = np.zeros((steps, B))
    target = np.zeros((steps + 1, B))
    cost_values = np.zeros((steps + 1, B, C))
    attempts = np.zeros((steps, B), dtype=np.int64)
    feats = []

    ev = evaluator(seqs[0], with_details=True)
    target[0] = ev.target
    cost_values[0] = ev.costs
    cur = seqs[0].copy()
    all_rows = np.arange(B)
    for t in range(steps):
        ctx = policy.prepare(inst, cur, ev)
        if keep_features:
            feats.append(ctx.X)
        cur_obj = ev.obj
        pending = all_rows
        drawn = 0
        nxt = cur.copy()
        while len(pending):
            k = 1 if phi is None else min(chunk, resample_cap - drawn)
            f, s, lp = policy.propose(ctx, pending, k, rng)
            n = len(pending)
            cand = np.repeat(cur[pending][:, None, :], k, axis=1)
            r_idx = np.arange(n)[:, None]
            c_idx = np.arange(k)[None, :]
            a, b_ = f + 1, s + 1
            va = cand[r_idx, c_idx, a]
            cand[r_idx, c_idx, a] = cand[r_idx, c_idx, b_]
            cand[r_idx, c_idx, b_] = va
            if phi is None:
                accept = np.ones((n, k), dtype=bool)
            else:
                cand_obj = evaluator(cand.reshape(n * k, S)).obj.reshape(n, k)
                improved = cur_obj[pending][:, None] >= cand_obj
                accept = rng.random((n, k)) >= reject_probability(improved, phi, shaping_mode)
                if drawn + k >= resample_cap:
                    accept[:, -1] = True
            drawn += k
            hit = accept.any(axis=1)
            pick = np.argmax(accept, axis=1)
            rows = pending[hit]
            sel = pick[hit]
            nxt[rows] = cand[hit, sel]
            first[t, rows] = f[hit, sel]
            second[t, rows] = s[hit, sel]
            log_probs[t, rows] = lp[hit, sel]
            attempts[t, rows] = drawn - k + sel + 1
            pending = pending[~hit]
        new_ev = evaluator(nxt, with_details=True)
        rewards[t] = ev.target - new_ev.target
        costs[t] = new_ev.costs - ev.costs
        target[t + 1] = new_ev.target
        cost_values[t + 1] = new_ev.costs
        seqs[t + 1] = nxt
        cur, ev = nxt, new_ev
    return RolloutBatch(inst, seqs, first, second, rewards, costs, log_probs, target, cost_values,
                        attempts, np.stack(feats) if keep_features and feats else None)


def rollout(instance: ProblemInstance, policy, steps: int, phi: float | None,
            rng: np.random.Generator, env_config: EnvConfig = DEFAULT_ENV,
            shaping_mode: str = EQUATION, resample_cap: int = RESAMPLE_CAP) -> Trajectory:
    """Single rollout as a :class:`Trajectory` of route states."""
    batch = rollout_batch(instance, policy, 1, steps, phi, rng, env_config, shaping_mode, resample_cap)
    return batch.to_trajectory(0)


def replay(traj: Trajectory, env_config: EnvConfig = DEFAULT_ENV) -> list[StepSignal]:
    """Re-apply each recorded action and check that states line up."""
    from .env import apply_swap

    signals = []
    for k, tr in enumerate(traj.transitions):
        nxt, sig = apply_swap(tr.state, tr.action, env_config)
        expected = traj.transitions[k + 1].state if k + 1 < len(traj.transitions) else traj.terminal_state
        if nxt.sequence != expected.sequence:
            raise ContractError(f"transition {k} does not replay")
        signals.append(sig)
    return signals
