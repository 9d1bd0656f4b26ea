"""Soft-constrained vehicle routing with a learned 2-exchange local search."""

from .env import EnvConfig, RouteState, SwapAction, apply_swap, enumerate_actions, evaluate, make_state, objective
from .errors import (
    ConfigError,
    ContractError,
    InfeasibleInstanceError,
    NumericError,
    SoftVRPError,
)
from .init_solution import initial_route
from .instance import ProblemInstance, Variant, generate_dataset, generate_instance, load_instance, save_instance
from .model import ModelParams, ModelPolicy, init_params, load_params, log_prob_and_grads, save_params
from .trainer import LagrangianState, TrainConfig, evaluate as evaluate_policy, lambda_gradient, train
from .trajectory import ReturnConfig, RandomPolicy, compute_returns, constrained_return, rollout, shaping_filter

__version__ = "0.1.0"
