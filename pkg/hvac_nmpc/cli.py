from __future__ import annotations

import argparse
import itertools
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import pandas as pd
from pydantic import ValidationError

from hvac_nmpc.checkpoint import load_checkpoint, save_checkpoint
from hvac_nmpc.config import MpcConfig, PlantConfig, RunConfig, TrainConfig, dump_json, scale_preset, settings
from hvac_nmpc.dataio import LagSpec, SplitManifest, fit_normalizer, generate_dataset, split_ids, window_all
from hvac_nmpc.errors import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_USAGE,
    RUNTIME_ERRORS,
    USAGE_ERRORS,
    ConfigError,
    InvalidArgumentError,
)
from hvac_nmpc.kpi import KpiReport, append_result, load_results
from hvac_nmpc.mpc import check_channels, receding_horizon, save_episode
from hvac_nmpc.plant import Plant, comfort_schedule, plant_weather
from hvac_nmpc.surrogate import build_model
from hvac_nmpc.trajectory import FLOAT_FORMAT, Trajectory, load_trajectories, save_trajectories
from hvac_nmpc.training import evaluate, one_step_mse, save_loss_curve, save_rollouts, train

logger = logging.getLogger(__name__)

MSE_SCALE = 1e5
SWEEP_SOLVERS = ("gdm", "sqp")


# ---- data directory helpers ----

def _load_data_dir(data_dir: Path) -> tuple[PlantConfig, SplitManifest, list[Trajectory]]:
    config_path = data_dir / "plant_config.json"
    manifest_path = data_dir / "manifest.json"
    for p in (config_path, manifest_path):
        if not p.is_file():
            raise ConfigError(f"Data directory {data_dir} is missing {p.name}; run generate first.")
    files = sorted(data_dir.glob("traj_*.csv"))
    if not files:
        raise ConfigError(f"No trajectory files in {data_dir}")
    trajectories = [tr for f in files for tr in load_trajectories(f)]
    return PlantConfig.load(config_path), SplitManifest.load(manifest_path), trajectories


def _train_config(args: argparse.Namespace, zone_count: int) -> TrainConfig:
    preset = scale_preset(args.scale, zone_count)
    return TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs or preset.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        width=args.width or preset.width,
        depth=args.depth,
    )


def _fit(kind: str, lags: LagSpec, config: TrainConfig, manifest: SplitManifest, trajectories: list[Trajectory]):
    train_trajs = manifest.select(trajectories, "train")
    val_trajs = manifest.select(trajectories, "val")
    if not train_trajs:
        raise ConfigError("Manifest selects no training trajectories")
    normalizer = fit_normalizer(train_trajs)
    first = train_trajs[0]
    model = build_model(
        kind, lags, normalizer, first.n_x, first.n_u, first.n_d,
        width=config.width, depth=config.depth, seed=config.seed,
    )
    train_set = window_all(train_trajs, lags)
    val_set = window_all(val_trajs, lags) if val_trajs else None
    return train(model, train_set, config, val_set)


def _one_step(model, trajectories: list[Trajectory]) -> float:
    if not trajectories:
        return float("nan")
    data = window_all(trajectories, model.lags)
    mean, std = model.normalizer.window_stats(model.lags)
    return one_step_mse(model, (data.inputs - mean) / std, model.normalizer.apply("x", data.targets))


# ---- commands ----

def cmd_generate(args: argparse.Namespace) -> int:
    run = RunConfig(plant_config_path=Path(args.config), output_dir=Path(args.out), seed=args.seed, scale=args.scale)
    run.validate_required()
    config = PlantConfig.load(run.plant_config_path)
    preset = scale_preset(run.scale, config.zone_count)
    count = args.count or preset.trajectories
    steps = args.steps or preset.steps

    out = run.output_dir
    out.mkdir(parents=True, exist_ok=True)
    trajectories = generate_dataset(config, count, steps, run.seed, workers=args.workers)
    for tr in trajectories:
        save_trajectories(out / f"traj_{tr.traj_id:04d}.csv", [tr])
    manifest = split_ids([tr.traj_id for tr in trajectories], seed=run.seed)
    manifest.save(out / "manifest.json")
    config.save(out / "plant_config.json")

    clamped = sum(tr.clamped_steps for tr in trajectories)
    print(f"GENERATE: {count} trajectories x {steps} steps -> {out}")
    print(f"Split: train={len(manifest.train)} val={len(manifest.val)} test={len(manifest.test)}")
    if clamped:
        print(f"Clamped controls: {clamped}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    run = RunConfig(data_dir=Path(args.data), lags=args.lags, model_kind=args.model, seed=args.seed, scale=args.scale)
    run.validate_required()
    plant_config, manifest, trajectories = _load_data_dir(run.data_dir)
    lags = LagSpec.parse(run.lags)
    config = _train_config(args, plant_config.zone_count)

    result = _fit(run.model_kind, lags, config, manifest, trajectories)
    model = result.model
    test_mse = _one_step(model, manifest.select(trajectories, "test"))

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        out,
        model,
        metadata={
            "plant_config": plant_config.model_dump(mode="json"),
            "train_config": config.model_dump(mode="json"),
            "best_epoch": result.best_epoch,
            "train_mse": result.best.train_mse,
            "val_mse": result.best.val_mse,
            "test_mse": test_mse,
        },
    )
    save_loss_curve(out.with_name(f"{out.stem}_loss.csv"), result.curve)

    print(f"TRAIN: {model.kind} lags={lags} params={model.parameter_count} best_epoch={result.best_epoch}")
    print(f"MSE (x1e-5): train={result.best.train_mse * MSE_SCALE:.3f} val={result.best.val_mse * MSE_SCALE:.3f} "
          f"test={test_mse * MSE_SCALE:.3f}")
    print(f"Checkpoint: {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    if args.horizon < 1:
        raise InvalidArgumentError(f"--horizon must be >= 1, got {args.horizon}")
    run = RunConfig(data_dir=Path(args.data), checkpoint_paths=[Path(args.ckpt)])
    run.validate_required()
    model, _ = load_checkpoint(run.checkpoint_paths[0])
    _, manifest, trajectories = _load_data_dir(run.data_dir)
    test = manifest.select(trajectories, args.split)

    result = evaluate(model, test, args.horizon, keep_rollouts=True)
    out = Path(args.out) if args.out else Path(args.ckpt).with_name(f"{Path(args.ckpt).stem}_rollout.csv")
    save_rollouts(out, result.rollouts)

    print(f"EVAL: {model.kind} {args.split} horizon={args.horizon} starts={result.starts} skipped={result.skipped}")
    print(f"MSE (x1e-5): {result.mse * MSE_SCALE:.3f}")
    print(f"Rollouts: {out}")
    return EXIT_OK


def _episode_job(job: tuple[str, str, str, float, int, dict, dict, str]) -> tuple[str, str, str, dict]:
    ckpt, label, solver, days, seed, plant_doc, mpc_doc, out_dir = job
    model, _ = load_checkpoint(ckpt)
    plant_config = PlantConfig.model_validate(plant_doc)
    mpc_config = MpcConfig.model_validate(mpc_doc)
    check_channels(model, plant_config)

    steps = int(round(days * 86400 / plant_config.sample_period))
    extra = model.lags.max_lag + mpc_config.horizon
    weather_days = math.ceil((steps + extra) * plant_config.sample_period / 86400.0)
    plant = Plant(plant_config, plant_weather(plant_config, seed, weather_days))
    episode = receding_horizon(plant, model, solver, steps, mpc_config)

    out = Path(out_dir)
    save_episode(out / f"episode_{label}_{solver}.csv", episode)
    episode.kpi.save(out / f"kpi_{label}_{solver}.json")
    return model.kind, solver, label, episode.kpi.model_dump()


def _checkpoint_labels(ckpts: list[Path]) -> list[str]:
    """File stems, suffixed with the checkpoint position where stems repeat."""
    stems = [c.stem for c in ckpts]
    return [s if stems.count(s) == 1 else f"{s}_{i}" for i, s in enumerate(stems)]


def cmd_mpc(args: argparse.Namespace) -> int:
    ckpts = [Path(c) for c in args.ckpt]
    run = RunConfig(checkpoint_paths=ckpts, plant_config_path=Path(args.config) if args.config else None)
    run.validate_required()
    mpc_config = MpcConfig.load(args.mpc_config) if args.mpc_config else MpcConfig()
    if args.horizon:
        mpc_config = mpc_config.model_copy(update={"horizon": args.horizon})

    if run.plant_config_path is not None:
        plant_config = PlantConfig.load(run.plant_config_path)
    else:
        _, meta = load_checkpoint(ckpts[0])
        if "plant_config" not in meta:
            raise ConfigError(f"{ckpts[0]} carries no plant config; pass --config")
        plant_config = PlantConfig.model_validate(meta["plant_config"])
    for c in ckpts:
        check_channels(load_checkpoint(c)[0], plant_config)

    solvers = list(SWEEP_SOLVERS) if args.sweep else [args.solver or mpc_config.solver]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plant_config.save(out / "plant_config.json")
    dump_json(out / "mpc_config.json", mpc_config.model_dump(mode="json"))
    plant_doc, mpc_doc = plant_config.model_dump(mode="json"), mpc_config.model_dump(mode="json")

    jobs = [
        (str(c), label, s, args.days, args.seed, plant_doc, mpc_doc, str(out))
        for (c, label), s in itertools.product(zip(ckpts, _checkpoint_labels(ckpts)), solvers)
    ]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_episode_job, jobs))
    else:
        results = [_episode_job(j) for j in jobs]

    for kind, solver, label, kpi in results:
        report = KpiReport.model_validate(kpi)
        append_result(out / "results.csv", kind, solver, report)
        print(
            f"MPC: {label} ({kind}) / {solver}: power={report.total_power:.4f} kWh/m2 "
            f"discomfort={report.discomfort:.3f} Kh occupied={report.occupied_discomfort:.3f} Kh "
            f"time mean={report.mean_solve_time:.3f}s max={report.max_solve_time:.3f}s "
            f"violations={report.violation_steps}"
        )
    return EXIT_OK


def _plot_frame(episode: pd.DataFrame, plant_config: PlantConfig) -> pd.DataFrame:
    t = episode["t_sec"].to_numpy()
    lower, upper = comfort_schedule(t, plant_config)
    frame = pd.DataFrame({"t_sec": t, "zone_temp": episode["x_0"], "lower": lower[:, 0], "upper": upper[:, 0]})
    for col in episode.columns:
        if col.startswith("u_"):
            frame[col] = episode[col]
    frame["ambient"] = episode["d_0"]
    return frame


def cmd_report(args: argparse.Namespace) -> int:
    run = RunConfig(results_dir=Path(args.results))
    run.validate_required()
    results_path = run.results_dir / "results.csv"
    if not results_path.is_file():
        raise ConfigError(f"No results.csv in {run.results_dir}")
    table = load_results(results_path)
    if table.empty:
        raise ConfigError(f"{results_path} has no result rows")

    table = table.sort_values("power_kwh_m2", kind="mergesort").reset_index(drop=True)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))

    config_path = run.results_dir / "plant_config.json"
    if config_path.is_file():
        plant_config = PlantConfig.load(config_path)
        for path in sorted(run.results_dir.glob("episode_*.csv")):
            episode = pd.read_csv(path, float_precision="round_trip")
            target = path.with_name(path.name.replace("episode_", "plot_", 1))
            _plot_frame(episode, plant_config).to_csv(target, index=False, float_format=FLOAT_FORMAT)
            print(f"Plot data: {target}")
    return EXIT_OK


def cmd_lagstudy(args: argparse.Namespace) -> int:
    run = RunConfig(data_dir=Path(args.data), seed=args.seed, scale=args.scale)
    run.validate_required()
    plant_config, manifest, trajectories = _load_data_dir(run.data_dir)
    config = _train_config(args, plant_config.zone_count)
    test = manifest.select(trajectories, "test")

    rows = []
    for m_x, m_u, m_d in itertools.product((1, 5), repeat=3):
        lags = LagSpec(m_x, m_u, m_d)
        result = _fit("mlp", lags, config, manifest, trajectories)
        test_mse = evaluate(result.model, test, args.horizon).mse
        rows.append((m_x, m_u, m_d, result.best.train_mse, result.best.val_mse, test_mse))
        print(
            f"LAGS {lags}: train={result.best.train_mse * MSE_SCALE:.3f} val={result.best.val_mse * MSE_SCALE:.3f} "
            f"test={test_mse * MSE_SCALE:.3f} (x1e-5)"
        )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(rows, columns=["m_x", "m_u", "m_d", "train_mse", "val_mse", "test_mse"])
    frame.to_csv(out / "lag_study.csv", index=False, float_format=FLOAT_FORMAT)
    print(f"Lag study: {out / 'lag_study.csv'}")
    return EXIT_OK


# ---- parser ----

def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=None, help="Defaults to the scale preset")
    p.add_argument("--width", type=int, default=None, help="Hidden width; defaults to the scale preset")
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=settings.seed)
    p.add_argument("--scale", choices=["desk", "paper"], default=settings.scale)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hvac_nmpc", description="Data-driven NMPC for building HVAC.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="Excite the plant and write trajectory CSVs + split manifest")
    p.add_argument("--config", required=True, help="PlantConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None, help="Trajectories K; defaults to the scale preset")
    p.add_argument("--steps", type=int, default=None, help="Steps T per trajectory; defaults to the scale preset")
    p.add_argument("--seed", type=int, default=settings.seed)
    p.add_argument("--scale", choices=["desk", "paper"], default=settings.scale)
    p.add_argument("--workers", type=int, default=settings.workers)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="Train a surrogate and write a checkpoint + loss curve")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="linear | mlp | lstm")
    p.add_argument("--lags", required=True, help="M_x,M_u,M_d")
    p.add_argument("--out", required=True, help="Checkpoint path (.json)")
    _add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Multi-step evaluation on a data split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, default=40)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--out", default=None, help="Rollout CSV; defaults next to the checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mpc", help="Run closed-loop MPC episodes")
    p.add_argument("--ckpt", required=True, action="append", help="Repeat for several models")
    p.add_argument("--solver", choices=["gdm", "sqp", "slsqp"], default=None, help="Defaults to the MPC config")
    p.add_argument("--sweep", action="store_true", help="Run every checkpoint with both gdm and sqp")
    p.add_argument("--days", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="PlantConfig JSON; defaults to the one stored in the checkpoint")
    p.add_argument("--mpc-config", default=None, help="MpcConfig JSON")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--seed", type=int, default=settings.seed, help="Weather seed")
    p.add_argument("--workers", type=int, default=settings.workers)
    p.set_defaults(func=cmd_mpc)

    p = sub.add_parser("report", help="Print the results table and write plot CSVs")
    p.add_argument("--results", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("lagstudy", help="Train the MLP over the {1,5}^3 lag grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--horizon", type=int, default=40)
    _add_train_options(p)
    p.set_defaults(func=cmd_lagstudy)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE

    logging.basicConfig(level=settings.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (*USAGE_ERRORS, ValidationError, FileNotFoundError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
