import csv
import json

import numpy as np
import pytest

from softvrp.errors import ConfigError, ContractError, NumericError
from softvrp.instance import Variant, generate_dataset, generate_instance
from softvrp.model import init_params
from softvrp.trainer import (
    Adam,
    LagrangianState,
    TrainConfig,
    evaluate,
    lambda_gradient,
    steps_for_size,
    summarize,
    train,
)
from softvrp.trajectory import RandomPolicy, ReturnConfig, compute_returns, rollout

SMALL = dict(total_updates=4, batch_size=3, steps_per_episode=8, width=16)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(alpha_lambda=1e-3, alpha_theta=5e-4)
    with pytest.raises(ConfigError):
        TrainConfig(steps_per_episode=0)
    with pytest.raises(ConfigError):
        TrainConfig(alpha_theta=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(return_form="sum-ish")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"alpha_theta": 5e-4, "bogus": 1})


def test_config_from_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"total_updates": 7, "gamma": 0.95}))
    cfg = TrainConfig.from_file(path)
    assert cfg.total_updates == 7 and cfg.gamma == 0.95 and cfg.alpha_theta == 5e-4
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    path.write_text("{")
    with pytest.raises(ConfigError):
        TrainConfig.from_file(path)


def test_steps_by_size():
    assert [steps_for_size(n) for n in (20, 50, 100, 10)] == [200, 300, 400, 100]
    assert TrainConfig().steps_for(generate_instance(Variant.CVRP, 20)) == 200


def test_phi_schedule():
    cfg = TrainConfig(total_updates=100)
    assert cfg.phi(0) == pytest.approx(0.5)
    assert cfg.phi(25) == pytest.approx(0.3)
    assert cfg.phi(50) == pytest.approx(0.1)
    assert cfg.phi(99) == pytest.approx(0.1)
    assert TrainConfig(shaping=False).phi(3) is None


def test_lambda_clamp():
    lagr = LagrangianState([0.1], [0.0], alpha_lambda=0.5)
    lagr.step([0.3])  # 0.1 - 0.15 = -0.05
    assert lagr.lambdas[0] == 0.0
    lagr.step([-0.2])
    assert lagr.lambdas[0] == pytest.approx(0.1)


def _traj(costs, rewards=None):
    inst = generate_instance(Variant.CVRP, 4, seed=0)
    traj = rollout(inst, RandomPolicy(), len(costs), None, np.random.default_rng(0))
    rewards = rewards if rewards is not None else np.linspace(0.5, -0.5, len(costs))
    for tr, c, r in zip(traj.transitions, costs, rewards):
        tr.costs, tr.reward = (float(c),), float(r)
    return traj


def test_lambda_gradient_zero_at_threshold():
    traj = _traj([0.2] * 6)
    lagr = LagrangianState([1.0], [0.2], 0.01)
    cfg = ReturnConfig(0.9, (1.0,), (0.2,))
    for t in range(6):
        assert lambda_gradient(traj, t, cfg, lagr)[0] == 0.0
    before = lagr.lambdas.copy()
    lagr.step(lambda_gradient(traj, 0, cfg, lagr))
    assert np.array_equal(lagr.lambdas, before)


def test_lambda_gradient_sign_and_window():
    costs = [0.3, 0.1, 0.4, 0.2, 0.5]
    rewards = [0.2, 1.0, -0.3, 0.6, -1.0]
    traj = _traj(costs, rewards)
    lagr = LagrangianState([0.7], [0.05], 0.01)
    cfg = ReturnConfig(1.0, (0.7,), (0.05,))
    for t in range(5):
        # independent window search
        x = [r - 0.7 * (c - 0.05) for r, c in zip(rewards, costs)]
        sums = [sum(x[t:e + 1]) for e in range(t, 5)]
        end = t + int(np.argmax(sums))
        g = lambda_gradient(traj, t, cfg, lagr)[0]
        assert g == pytest.approx(-sum(c - 0.05 for c in costs[t:end + 1]), abs=1e-12)
        assert g < 0
    lam0 = lagr.lambdas[0]
    lagr.step(lambda_gradient(traj, 0, cfg, lagr))
    assert lagr.lambdas[0] > lam0


def test_lambda_gradient_rejects_foreign_returns():
    traj = _traj([0.3] * 4)
    cfg = ReturnConfig(0.9, (2.0,), (0.0,))
    ret = compute_returns(traj.rewards, traj.costs, cfg)
    with pytest.raises(ContractError):
        lambda_gradient(traj, 0, cfg, LagrangianState([1.0], [0.0], 0.01), returns=ret)


def test_zero_updates_return_initial_params():
    data = generate_dataset(Variant.CVRP, 5, 3, None, seed=0)
    cfg = TrainConfig(total_updates=0, width=16, seed=4)
    res = train(data, cfg)
    assert np.array_equal(res.params.to_vector(), init_params(16, seed=4).to_vector())
    assert res.log == [] and res.lagrangian.lambdas.tolist() == [1.0]


def test_training_is_deterministic_and_logs_columns(tmp_path):
    data = generate_dataset(Variant.CVRPTW, 6, 5, None, seed=1)
    cfg = TrainConfig(**SMALL, lambda_every=2)
    a, b = train(data, cfg), train(data, cfg)
    strip = lambda log: [{k: v for k, v in row.items() if k != "seconds"} for row in log]
    assert strip(a.log) == strip(b.log)
    assert np.array_equal(a.params.to_vector(), b.params.to_vector())
    a.write_log(tmp_path / "log.csv")
    header = next(csv.reader(open(tmp_path / "log.csv")))
    for col in ("update", "mean_obj", "mean_tgt", "cost_capacity", "cost_time_window", "lambda_capacity",
                "lambda_time_window", "policy_loss", "baseline_mse", "phi", "seconds"):
        assert col in header


def test_lambdas_stay_nonnegative_and_move_on_cadence():
    data = generate_dataset(Variant.CVRPTW, 6, 5, None, seed=2)
    cfg = TrainConfig(**{**SMALL, "total_updates": 6}, lambda_every=3, lambda_init=0.0, alpha_lambda=1e-4)
    res = train(data, cfg)
    lam = np.array([[row["lambda_capacity"], row["lambda_time_window"]] for row in res.log])
    assert np.all(lam >= 0)
    assert np.array_equal(lam[0], lam[2])  # no step before the third update finishes
    assert np.all(res.lagrangian.lambdas >= 0)


def test_parameters_change_after_training():
    data = generate_dataset(Variant.CVRP, 6, 4, None, seed=3)
    cfg = TrainConfig(**SMALL)
    res = train(data, cfg)
    assert not np.array_equal(res.params.to_vector(), init_params(16, seed=0).to_vector())


def test_nan_aborts_with_snapshot():
    data = generate_dataset(Variant.CVRP, 6, 2, None, seed=3)
    params = init_params(16)
    params["vhead.u"][0] = np.nan
    with pytest.raises(NumericError) as err:
        train(data, TrainConfig(**SMALL), params=params)
    assert err.value.snapshot["update"] == 0


def test_empty_instance_set():
    with pytest.raises(ConfigError):
        train([], TrainConfig(**SMALL))


def test_adam_first_step_moves_by_learning_rate():
    opt = Adam(3, lr=0.01)
    theta = opt.step(np.zeros(3), np.array([2.0, -0.5, 0.0]))
    assert theta == pytest.approx([-0.01, 0.01, 0.0], abs=1e-9)


def test_evaluate_rows_and_summary():
    data = generate_dataset(Variant.CVRPTW, 6, 4, None, seed=5)
    cfg = TrainConfig(**SMALL)
    rows = evaluate(data, init_params(16), None, cfg)
    assert len(rows) == 4
    for r in rows:
        assert r["obj"] == pytest.approx(r["tgt"] + r["cost"], abs=1e-12)
        assert r["obj"] == pytest.approx(r["best_obj"], abs=1e-12)
        assert r["best_obj"] <= min(r["init_obj"], r["final_obj"]) + 1e-12
        assert r["seconds"] > 0
    summary = summarize(rows)
    assert summary["obj_sd"] >= 0


def test_feasible_only_set_reports_zero_cost():
    data = generate_dataset(Variant.CVRP, 5, 3, 1000, seed=6)  # capacity never binds
    rows = evaluate(data, init_params(16), None, TrainConfig(**SMALL))
    assert all(r["cost"] == 0.0 for r in rows)
