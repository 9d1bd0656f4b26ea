"""Lagrangian constrained policy optimization and evaluation.

One update rolls out a batch with the current policy, scores every step
with the constrained return under frozen multipliers, takes an Adam step on
the policy (gradient ascent) and the baseline (squared-error descent), and
every ``lambda_every`` updates moves the multipliers by a projected
subgradient step.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import EnvConfig, cost_names
from .errors import ConfigError, NumericError
from .fastenv import BatchEvaluator
from .instance import ProblemInstance, Variant
from .model import ModelParams, ModelPolicy, init_params, log_prob_and_grads
from .trajectory import (
    EQUATION,
    MAX_WINDOW,
    PROSE,
    RESAMPLE_CAP,
    RETURN_FORMS,
    ReturnConfig,
    Returns,
    Trajectory,
    compute_returns,
    lambda_gradient_from,
    rollout_batch,
)

log = logging.getLogger(__name__)

# Episode length per benchmark size; other sizes use 10 steps per customer, capped at 400.
STEPS_BY_SIZE = {20: 200, 50: 300, 100: 400}


def steps_for_size(num_customers: int) -> int:
    return STEPS_BY_SIZE.get(num_customers, min(400, 10 * num_customers))


@dataclass
class TrainConfig:
    alpha_theta: float = 5e-4
    alpha_omega: float = 5e-4
    alpha_lambda: float = 5e-5
    gamma: float = 0.9
    steps_per_episode: int | None = None  # None: by instance size
    batch_size: int = 32
    total_updates: int = 2000
    phi_start: float = 0.5
    phi_end: float = 0.1
    phi_eval: float = 0.1
    lambda_init: float | list = 1.0
    epsilon_c: float | list = 0.0
    lambda_every: int = 10
    first_node_epsilon: float = 0.05
    width: int = 64
    seed: int = 0
    tw_cost_form: str = "conventional"
    double_count_earliness: bool = False
    shaping: bool = True
    shaping_mode: str = EQUATION
    return_form: str = MAX_WINDOW
    subtract_baseline: bool = True
    resample_cap: int = RESAMPLE_CAP

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("alpha_theta", "alpha_omega", "alpha_lambda"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not self.alpha_lambda < self.alpha_theta:
            raise ConfigError("alpha_lambda must be smaller than alpha_theta (slow multiplier timescale)")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.steps_per_episode is not None and self.steps_per_episode < 1:
            raise ConfigError("steps_per_episode must be >= 1")
        if self.batch_size < 1 or self.total_updates < 0 or self.lambda_every < 1:
            raise ConfigError("batch_size and lambda_every must be >= 1, total_updates >= 0")
        for name in ("phi_start", "phi_end", "phi_eval", "first_node_epsilon"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.shaping_mode not in (EQUATION, PROSE):
            raise ConfigError(f"unknown shaping_mode {self.shaping_mode!r}")
        if self.return_form not in RETURN_FORMS:
            raise ConfigError(f"unknown return_form {self.return_form!r}")
        if self.tw_cost_form not in ("conventional", "literal"):
            raise ConfigError(f"unknown tw_cost_form {self.tw_cost_form!r}")
        if np.any(np.asarray(self.lambda_init, dtype=float) < 0):
            raise ConfigError("lambda_init must be non-negative")

    @property
    def env(self) -> EnvConfig:
        return EnvConfig(self.tw_cost_form, self.double_count_earliness)

    def steps_for(self, instance: ProblemInstance) -> int:
        return self.steps_per_episode or steps_for_size(instance.num_customers)

    def phi(self, update: int) -> float | None:
        """Linear decay from phi_start to phi_end over the first half of training."""
        if not self.shaping:
            return None
        half = max(1, self.total_updates // 2)
        frac = min(1.0, update / half)
        return self.phi_start + (self.phi_end - self.phi_start) * frac

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: "str | Path") -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)


@dataclass
class LagrangianState:
    lambdas: np.ndarray
    epsilons: np.ndarray
    alpha_lambda: float

    def __post_init__(self):
        self.lambdas = np.maximum(np.asarray(self.lambdas, dtype=np.float64), 0.0)
        self.epsilons = np.asarray(self.epsilons, dtype=np.float64)

    def step(self, grad) -> np.ndarray:
        """Projected subgradient step ``lambda <- max(0, lambda - alpha * grad)``."""
        self.lambdas = np.maximum(0.0, self.lambdas - self.alpha_lambda * np.asarray(grad, dtype=np.float64))
        return self.lambdas

    def return_config(self, gamma: float, form: str = MAX_WINDOW) -> ReturnConfig:
        return ReturnConfig(gamma, tuple(self.lambdas), tuple(self.epsilons), form)

    def to_dict(self) -> dict:
        return {"lambdas": self.lambdas.tolist(), "epsilons": self.epsilons.tolist(),
                "alpha_lambda": self.alpha_lambda}


def initial_lagrangian(variant: Variant, config: TrainConfig) -> LagrangianState:
    C = len(cost_names(variant))
    lam = np.broadcast_to(np.asarray(config.lambda_init, dtype=float), (C,)).copy()
    eps = np.broadcast_to(np.asarray(config.epsilon_c, dtype=float), (C,)).copy()
    return LagrangianState(lam, eps, config.alpha_lambda)


def lambda_gradient(traj: Trajectory, t: int, config: ReturnConfig, lagr: LagrangianState,
                    returns: Returns | None = None) -> np.ndarray:
    """Per-constraint derivative of ``G_t`` at its maximizing window.

    ``returns`` computed elsewhere must use the multipliers in ``lagr``;
    otherwise the window index would belong to a different objective.
    """
    if returns is None:
        if tuple(config.lambdas) != tuple(float(x) for x in lagr.lambdas):
            config = dataclasses.replace(config, lambdas=tuple(lagr.lambdas))
        returns = compute_returns(traj.rewards, traj.costs, config)
    return lambda_gradient_from(returns, traj.costs, t, lambdas=lagr.lambdas)


class Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """One descent step on ``theta`` along ``grad``."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    params: ModelParams
    lagrangian: LagrangianState
    log: list[dict] = field(default_factory=list)

    def write_log(self, path: "str | Path") -> None:
        write_csv(self.log, path)


def write_csv(rows: list[dict], path: "str | Path") -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _reward_bound(instance: ProblemInstance) -> float:
    extra = float(np.sum(instance.tw_start[1:])) if instance.variant.timed else 0.0
    return instance.reward_bound + extra


def train(instances: list[ProblemInstance], config: TrainConfig, params: ModelParams | None = None,
          progress=None) -> TrainResult:
    """Train on ``instances`` (one instance drawn per update, ``batch_size`` rollouts on it).

    Deterministic for a fixed config and seed. ``progress`` is called with
    each log row.
    """
    if not instances:
        raise ConfigError("training needs at least one instance")
    variant = instances[0].variant
    if any(inst.variant is not variant for inst in instances):
        raise ConfigError("all training instances must share one variant")
    names = cost_names(variant)
    # instance draws get their own stream so runs that differ only in
    # algorithm settings see the same instance sequence
    pick_rng, rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    if params is None:
        params = init_params(config.width, seed=config.seed, variant=variant.value)
    params = params.copy()
    lagr = initial_lagrangian(variant, config)
    adam = Adam(params.size, config.alpha_theta)
    ratio = config.alpha_omega / config.alpha_theta
    env = config.env
    lam_acc = np.zeros(len(names))
    lam_count = 0
    rows = []

    for update in range(config.total_updates):
        t0 = time.perf_counter()
        phi = config.phi(update)
        inst = instances[int(pick_rng.integers(len(instances)))]
        rb = rollout_batch(inst, ModelPolicy(params, config.first_node_epsilon), config.batch_size,
                           config.steps_for(inst), phi, rng, env, config.shaping_mode,
                           config.resample_cap, keep_features=True)
        T, B = rb.steps, rb.batch_size
        best = rb.best_index()
        cols = np.arange(B)
        row = {
            "update": update,
            "mean_obj": float(rb.obj[best, cols].mean()),
            "mean_final_obj": float(rb.obj[-1].mean()),
            "mean_tgt": float(rb.target[best, cols].mean()),
        }
        for c, name in enumerate(names):
            row[f"cost_{name}"] = float(rb.cost_values[best, cols, c].mean())
        for c, name in enumerate(names):
            row[f"lambda_{name}"] = float(lagr.lambdas[c])
        if T == 0:
            row.update(policy_loss=0.0, baseline_mse=0.0, phi=phi if phi is not None else 0.0,
                       seconds=time.perf_counter() - t0)
            rows.append(row)
            continue
        assert np.all(np.abs(rb.rewards) <= _reward_bound(rb.instance) + 1e-9), "reward out of bounds"

        rcfg = lagr.return_config(config.gamma, config.return_form)
        G = np.empty((T, B))
        for b in range(B):
            ret = compute_returns(rb.rewards[:, b], rb.costs[:, b], rcfg)
            G[:, b] = ret.values
            lam_acc += lambda_gradient_from(ret, rb.costs[:, b], None, lambdas=lagr.lambdas)
            lam_count += 1

        X = rb.features.reshape(T * B, *rb.features.shape[2:])
        weights = np.full(T * B, 1.0 / (T * B))
        try:
            res = log_prob_and_grads(params, X, rb.first.reshape(-1), rb.second.reshape(-1),
                                     G.reshape(-1), weights, config.subtract_baseline, mix=ratio)
        except NumericError as exc:
            exc.snapshot.update(update=update, lambdas=lagr.lambdas.tolist(), row=row)
            raise
        direction = -res.direction
        if not np.all(np.isfinite(direction)):
            raise NumericError(f"non-finite update direction at update {update}", step=update,
                               snapshot={"row": row, "lambdas": lagr.lambdas.tolist()})
        params.vector[:] = adam.step(params.vector, direction)

        if (update + 1) % config.lambda_every == 0 and lam_count:
            lagr.step(lam_acc / lam_count)
            lam_acc[:] = 0.0
            lam_count = 0

        row.update(
            policy_loss=-res.policy_objective,
            baseline_mse=res.baseline_mse,
            phi=phi if phi is not None else 0.0,
            seconds=time.perf_counter() - t0,
        )
        if not np.isfinite(row["policy_loss"]) or not np.isfinite(row["baseline_mse"]):
            raise NumericError(f"NaN loss at update {update}", step=update, snapshot={"row": row})
        rows.append(row)
        if progress is not None:
            progress(row)
    return TrainResult(params, lagr, rows)


# -- evaluation --------------------------------------------------------------

def describe_state(instance: ProblemInstance, seq, env: EnvConfig) -> dict:
    ev = BatchEvaluator(instance, env)(np.asarray(seq)[None])
    obj = float(ev.obj[0])
    return {
        "obj": obj,
        "tgt": float(ev.target[0]),
        "travel": float(ev.travel[0]),
        "waiting": float(ev.waiting[0]),
        "cost_capacity": float(ev.capacity[0]),
        "cost_earliness": float(ev.earliness[0]),
        "cost_lateness": float(ev.lateness[0]),
        "cost": float(ev.costs[0].sum()),
    }


def rollout_metrics(rb, env: EnvConfig, report: str = "best", b: int = 0) -> dict:
    """Objective decomposition of the best-visited (or final) state of rollout ``b``."""
    if report not in ("best", "final"):
        raise ValueError("report must be 'best' or 'final'")
    idx = int(rb.best_index()[b]) if report == "best" else rb.steps
    out = describe_state(rb.instance, rb.seqs[idx, b], env)
    out["best_obj"] = float(rb.obj[:, b].min())
    out["final_obj"] = float(rb.obj[-1, b])
    out["init_obj"] = float(rb.obj[0, b])
    return out


def evaluate(instances: list[ProblemInstance], params: ModelParams, lagr: LagrangianState | None,
             config: TrainConfig, seed: int = 0, report: str = "best", phi: float | None = -1.0) -> list[dict]:
    """Per-instance metrics of the greedy-first-node policy with shaping at ``phi_eval``.

    ``seconds`` covers the rollout only. ``lagr`` is recorded for reference;
    evaluation itself does not depend on the multipliers.
    """
    streams = np.random.SeedSequence(seed).spawn(len(instances))
    phi = config.phi_eval if phi == -1.0 else phi
    policy = ModelPolicy(params, 0.0)
    rows = []
    for k, inst in enumerate(instances):
        rng = np.random.default_rng(streams[k])
        t0 = time.perf_counter()
        rb = rollout_batch(inst, policy, 1, config.steps_for(inst), phi, rng, config.env,
                           config.shaping_mode, config.resample_cap)
        seconds = time.perf_counter() - t0
        row = {"instance": k, **rollout_metrics(rb, config.env, report), "seconds": seconds}
        rows.append(row)
    return rows


def summarize(rows: list[dict]) -> dict:
    """Mean of every numeric column plus the standard deviation of ``obj``."""
    keys = [k for k in rows[0] if k != "instance"]
    out = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    out["obj_sd"] = float(np.std([r["obj"] for r in rows], ddof=1)) if len(rows) > 1 else 0.0
    return out
