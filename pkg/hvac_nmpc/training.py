from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from hvac_nmpc import diff
from hvac_nmpc.config import TrainConfig
from hvac_nmpc.dataio import Dataset
from hvac_nmpc.diff import Tape
from hvac_nmpc.errors import ContractError, InvalidArgumentError, NumericDomainError, ShapeError, TrainingError
from hvac_nmpc.optim import Adam
from hvac_nmpc.surrogate import History, SurrogateModel, rollout
from hvac_nmpc.trajectory import FLOAT_FORMAT, Trajectory

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float


@dataclass(frozen=True)
class TrainResult:
    model: SurrogateModel
    curve: list[EpochRecord]
    best_epoch: int

    @property
    def best(self) -> EpochRecord:
        return self.curve[self.best_epoch - 1]


def _normalized(model: SurrogateModel, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    mean, std = model.normalizer.window_stats(model.lags)
    return (dataset.inputs - mean) / std, model.normalizer.apply("x", dataset.targets)


def _check_dataset(model: SurrogateModel, dataset: Dataset, name: str) -> None:
    if dataset.inputs.shape[1] != model.input_width or dataset.targets.shape[1] != model.n_x:
        raise ShapeError(
            f"{name} dataset vs {model.kind} model",
            dataset.inputs.shape,
            (len(dataset), model.input_width),
        )


def one_step_mse(model: SurrogateModel, z: np.ndarray, y: np.ndarray) -> float:
    """MSE of normalized one-step predictions against normalized targets."""
    if len(z) == 0:
        return float("nan")
    tape = Tape()
    out, _ = model.forward(tape, model.bind(tape), tape.constant(z))
    return float(np.mean((out.value - y) ** 2))


def _loss_and_grads(model: SurrogateModel, z: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    p = model.bind(tape, trainable=True)
    out, _ = model.forward(tape, p, tape.constant(z))
    loss = diff.mse(out, tape.constant(y))
    grads = diff.backward(tape, loss)
    zero = {name: np.zeros_like(t.value) for name, t in p.items()}
    return float(loss.value), {name: grads.get(t.id, zero[name]) for name, t in p.items()}


def train(
    model: SurrogateModel,
    dataset: Dataset,
    config: TrainConfig,
    val_dataset: Dataset | None = None,
) -> TrainResult:
    """
    Minibatch Adam on one-step MSE in normalized space. Returns the parameters of the epoch
    with the lowest validation MSE (training MSE when no validation set is given).
    """
    if len(dataset) == 0:
        raise ContractError("train: dataset is empty")
    _check_dataset(model, dataset, "train")
    z, y = _normalized(model, dataset)
    if val_dataset is not None and len(val_dataset) > 0:
        _check_dataset(model, val_dataset, "val")
        zv, yv = _normalized(model, val_dataset)
    else:
        zv, yv = z, y

    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    params = dict(model.params)
    current = model
    curve: list[EpochRecord] = []
    best_params, best_val, best_epoch = params, float("inf"), 0

    logger.info(
        "TRAIN: %s model, %d params, %d samples, %d epochs, batch %d",
        model.kind, model.parameter_count, len(dataset), config.epochs, config.batch_size,
    )
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(z))
        try:
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                loss, grads = _loss_and_grads(current, z[idx], y[idx])
                if not np.isfinite(loss):
                    raise NumericDomainError("non-finite minibatch loss")
                params = opt.step(params, grads)
                current = model.with_params(params)
            train_mse = one_step_mse(current, z, y)
            val_mse = one_step_mse(current, zv, yv)
        except NumericDomainError as e:
            raise TrainingError(f"{model.kind} training diverged: {e}", epoch=epoch) from e
        if not (np.isfinite(train_mse) and np.isfinite(val_mse)):
            raise TrainingError(f"{model.kind} training diverged: MSE is not finite", epoch=epoch)

        curve.append(EpochRecord(epoch, train_mse, val_mse))
        if val_mse < best_val:
            best_params, best_val, best_epoch = params, val_mse, epoch
        logger.debug("TRAIN: epoch %d train_mse=%.6g val_mse=%.6g", epoch, train_mse, val_mse)

    logger.info("TRAIN: best epoch %d val_mse=%.6g", best_epoch, best_val)
    return TrainResult(model=model.with_params(best_params), curve=curve, best_epoch=best_epoch)


def save_loss_curve(path: str | Path, curve: list[EpochRecord]) -> None:
    frame = pd.DataFrame(
        {
            "epoch": [r.epoch for r in curve],
            "train_mse": [r.train_mse for r in curve],
            "val_mse": [r.val_mse for r in curve],
        }
    )
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


# ---- multi-step evaluation ----

@dataclass(frozen=True)
class RolloutRecord:
    traj_id: int
    start_t: int
    predicted: np.ndarray  # (H, n_x) raw units
    true: np.ndarray


@dataclass(frozen=True)
class EvalResult:
    mse: float
    starts: int
    skipped: int
    horizon: int
    rollouts: list[RolloutRecord] = field(default_factory=list)


def evaluate(
    model: SurrogateModel,
    trajectories: list[Trajectory],
    horizon: int = 40,
    *,
    keep_rollouts: bool = False,
    chunk: int = 256,
) -> EvalResult:
    """
    Mean normalized MSE of `horizon`-step rollouts driven by the true controls and disturbances,
    over every admissible start t (max_lag <= t <= len - 1 - horizon). Too-short trajectories are skipped.
    """
    if horizon < 1:
        raise InvalidArgumentError("evaluate: horizon must be >= 1")
    lags = model.lags
    total, count, starts, skipped = 0.0, 0, 0, 0
    rollouts: list[RolloutRecord] = []

    for traj in trajectories:
        if (traj.n_x, traj.n_u, traj.n_d) != (model.n_x, model.n_u, model.n_d):
            raise ShapeError("evaluate trajectory channels", (traj.n_x, traj.n_u, traj.n_d), (model.n_x, model.n_u, model.n_d))
        ts = np.arange(lags.max_lag, len(traj) - horizon)
        if len(ts) == 0:
            skipped += 1
            continue
        for lo in range(0, len(ts), chunk):
            batch = ts[lo : lo + chunk]
            history = History(
                x=np.stack([traj.x[t - lags.m_x : t + 1] for t in batch]),
                u=np.stack([traj.u[t - lags.m_u : t] for t in batch]),
                d=np.stack([traj.d[t - lags.m_d : t] for t in batch]),
            )
            u = np.stack([traj.u[t : t + horizon] for t in batch])
            d = np.stack([traj.d[t : t + horizon] for t in batch])
            truth = np.stack([traj.x[t + 1 : t + 1 + horizon] for t in batch])
            pred = rollout(model, history, u, d)

            err = model.normalizer.apply("x", pred) - model.normalizer.apply("x", truth)
            total += float(np.sum(err * err))
            count += err.size
            if keep_rollouts:
                rollouts.extend(
                    RolloutRecord(traj.traj_id, int(t), pred[i], truth[i]) for i, t in enumerate(batch)
                )
        starts += len(ts)

    if skipped:
        logger.warning("EVAL: skipped %d trajectories shorter than lags + horizon (%d)", skipped, lags.max_lag + horizon + 1)
    mse = total / count if count else float("nan")
    return EvalResult(mse=mse, starts=starts, skipped=skipped, horizon=horizon, rollouts=rollouts)


def save_rollouts(path: str | Path, rollouts: list[RolloutRecord], channel_names: list[str] | None = None) -> None:
    """Long-format CSV start_t,step,channel,predicted,true (step 1 is x_{t+1})."""
    rows = []
    for r in rollouts:
        names = channel_names or [f"x_{i}" for i in range(r.predicted.shape[1])]
        for k in range(r.predicted.shape[0]):
            for c, name in enumerate(names):
                rows.append((r.start_t, k + 1, name, r.predicted[k, c], r.true[k, c]))
    frame = pd.DataFrame(rows, columns=["start_t", "step", "channel", "predicted", "true"])
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
