from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from conftest import linear_model, make_trajectory
from hvac_nmpc.config import TrainConfig
from hvac_nmpc.dataio import Dataset, LagSpec, Normalizer, fit_normalizer, window, window_all
from hvac_nmpc.errors import InvalidArgumentError, ShapeError, TrainingError
from hvac_nmpc.surrogate import build_model, predict_one, predict_windows
from hvac_nmpc.trajectory import Trajectory
from hvac_nmpc.training import evaluate, one_step_mse, save_loss_curve, save_rollouts, train

ZERO = LagSpec(0, 0, 0)


def _doubling_trajectory(steps: int = 201, seed: int = 0) -> Trajectory:
    """x_{t+1} = 2 u_t, with an unrelated disturbance channel."""
    r = np.random.default_rng(seed)
    u = r.uniform(size=(steps, 1))
    x = np.zeros((steps, 1))
    x[1:] = 2.0 * u[:-1]
    return Trajectory(x=x, u=u, d=r.normal(size=(steps, 1)), t=np.arange(steps) * 900.0)


def _linear_plant_trajectory(model, steps: int, seed: int) -> Trajectory:
    """Roll a model forward on random controls, so the model is exact for its own data."""
    r = np.random.default_rng(seed)
    u = r.uniform(size=(steps, model.n_u))
    d = r.normal(size=(steps, model.n_d))
    x = np.zeros((steps, model.n_x))
    x[0] = r.normal(size=model.n_x)
    for t in range(steps - 1):
        x[t + 1] = predict_one(model, x[t : t + 1], u[t : t + 1], d[t : t + 1])
    return Trajectory(x=x, u=u, d=d, t=np.arange(steps) * 900.0)


def test_linear_model_recovers_a_doubling_gain():
    tr = _doubling_trajectory()
    ds = window(tr, ZERO)
    model = build_model("linear", ZERO, fit_normalizer([tr]), 1, 1, 1, seed=0)
    result = train(model, ds, TrainConfig(learning_rate=0.01, epochs=300, batch_size=32, seed=0))
    base = np.array([[0.0, 0.0, 0.0]])
    step = np.array([[0.0, 1.0, 0.0]])
    gain = (predict_windows(result.model, step) - predict_windows(result.model, base))[0, 0]
    assert gain == pytest.approx(2.0, abs=1e-3)


def test_identical_samples_give_non_increasing_loss():
    lags = LagSpec(1, 0, 0)
    row = np.array([0.5, -1.0, 2.0, 0.3, 1.0, -0.7, 0.2])
    ds = Dataset(
        inputs=np.tile(row, (16, 1)),
        targets=np.tile([5.0, -4.0], (16, 1)),
        traj_ids=np.zeros(16, dtype=np.int64),
        times=np.arange(16),
        lags=lags,
        n_x=2,
        n_u=2,
        n_d=1,
    )
    model = build_model("linear", lags, Normalizer.identity(2, 2, 1), 2, 2, 1, seed=1)
    result = train(model, ds, TrainConfig(learning_rate=1e-4, epochs=30, batch_size=64, seed=0))
    losses = [r.train_mse for r in result.curve]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_training_is_deterministic_and_keeps_the_best_epoch():
    trajs = [make_trajectory(30, seed=s, traj_id=s) for s in range(3)]
    lags = LagSpec(1, 1, 1)
    norm = fit_normalizer(trajs[:2])
    config = TrainConfig(learning_rate=0.01, epochs=8, batch_size=8, seed=3)
    model = build_model("mlp", lags, norm, 2, 1, 1, width=5, depth=2, seed=3)
    train_set, val_set = window_all(trajs[:2], lags), window_all(trajs[2:], lags)

    a = train(model, train_set, config, val_set)
    b = train(model, train_set, config, val_set)
    assert [r.val_mse for r in a.curve] == [r.val_mse for r in b.curve]
    assert len(a.curve) == 8
    assert a.best.val_mse == min(r.val_mse for r in a.curve)
    mean, std = norm.window_stats(lags)
    z = (val_set.inputs - mean) / std
    assert one_step_mse(a.model, z, norm.apply("x", val_set.targets)) == pytest.approx(a.best.val_mse, rel=1e-12)


def test_divergence_reports_the_epoch():
    tr = _doubling_trajectory(40)
    model = build_model("linear", ZERO, fit_normalizer([tr]), 1, 1, 1, seed=0)
    with pytest.raises(TrainingError) as err:
        train(model, window(tr, ZERO), TrainConfig(learning_rate=1e200, epochs=5))
    assert err.value.epoch == 1


def test_dataset_width_must_match_model():
    tr = make_trajectory(20)
    model = build_model("linear", LagSpec(1, 1, 1), fit_normalizer([tr]), 2, 1, 1)
    with pytest.raises(ShapeError):
        train(model, window(tr, ZERO), TrainConfig(epochs=1))


def test_perfect_model_has_zero_rollout_error():
    r = np.random.default_rng(0)
    model = linear_model(ZERO, 2, 1, 1, A_0=0.5 * np.eye(2), B_0=r.normal(size=(2, 1)), C_0=r.normal(size=(2, 1)))
    trajs = [_linear_plant_trajectory(model, 30, seed) for seed in range(2)]
    result = evaluate(model, trajs, horizon=5)
    assert result.mse < 1e-20
    assert result.starts == 2 * (30 - 5)


def test_horizon_one_equals_one_step_mse():
    trajs = [make_trajectory(25, seed=s, traj_id=s) for s in range(2)]
    lags = LagSpec(1, 2, 1)
    norm = fit_normalizer(trajs)
    model = build_model("mlp", lags, norm, 2, 1, 1, width=4, depth=2, seed=0)
    ds = window_all(trajs, lags)
    mean, std = norm.window_stats(lags)
    expected = one_step_mse(model, (ds.inputs - mean) / std, norm.apply("x", ds.targets))
    assert evaluate(model, trajs, horizon=1).mse == pytest.approx(expected, rel=1e-9)


def test_short_trajectories_are_skipped():
    trajs = [make_trajectory(50, seed=0), make_trajectory(10, seed=1, traj_id=1)]
    model = build_model("linear", LagSpec(1, 1, 1), fit_normalizer(trajs), 2, 1, 1)
    result = evaluate(model, trajs, horizon=40)
    assert result.skipped == 1
    assert result.starts == 50 - 40 - 1


def test_evaluate_rejects_non_positive_horizon():
    model = build_model("linear", ZERO, Normalizer.identity(2, 1, 1), 2, 1, 1)
    with pytest.raises(InvalidArgumentError):
        evaluate(model, [make_trajectory(5)], horizon=0)


def test_curve_and_rollout_files(tmp_path):
    trajs = [make_trajectory(20, seed=s, traj_id=s) for s in range(2)]
    model = build_model("linear", ZERO, fit_normalizer(trajs), 2, 1, 1)
    result = train(model, window_all(trajs, ZERO), TrainConfig(epochs=3, learning_rate=0.01))
    save_loss_curve(tmp_path / "loss.csv", result.curve)
    curve = pd.read_csv(tmp_path / "loss.csv")
    assert list(curve.columns) == ["epoch", "train_mse", "val_mse"]
    assert list(curve["epoch"]) == [1, 2, 3]

    ev = evaluate(result.model, trajs[:1], horizon=3, keep_rollouts=True)
    save_rollouts(tmp_path / "rollout.csv", ev.rollouts)
    frame = pd.read_csv(tmp_path / "rollout.csv")
    assert list(frame.columns) == ["start_t", "step", "channel", "predicted", "true"]
    assert len(frame) == ev.starts * 3 * 2
    assert set(frame["step"]) == {1, 2, 3}
