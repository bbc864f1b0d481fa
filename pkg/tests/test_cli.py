from __future__ import annotations

import json
import shutil
import subprocess
import sys
from pathlib import Path

import pandas as pd
import pytest

from hvac_nmpc.checkpoint import load_checkpoint
from hvac_nmpc.cli import main
from hvac_nmpc.config import PlantConfig
from hvac_nmpc.dataio import SplitManifest
from hvac_nmpc.kpi import RESULT_COLUMNS, KpiReport, append_result
from hvac_nmpc.trajectory import load_trajectories

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
TINY = ["--epochs", "2", "--width", "4", "--depth", "1", "--batch-size", "16"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("data")
    code = main(
        ["generate", "--config", str(CONFIGS / "single_zone.json"), "--out", str(out), "--count", "4", "--steps", "30",
         "--seed", "7", "--workers", "1"]
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def checkpoints(data_dir, tmp_path_factory) -> dict[str, Path]:
    out = tmp_path_factory.mktemp("models")
    paths = {}
    for kind in ("linear", "mlp", "lstm"):
        path = out / f"{kind}.json"
        assert main(["train", "--data", str(data_dir), "--model", kind, "--lags", "1,1,1", "--out", str(path), *TINY]) == 0
        paths[kind] = path
    return paths


@pytest.fixture
def mpc_config(tmp_path) -> Path:
    path = tmp_path / "mpc.json"
    path.write_text(json.dumps({"horizon": 3, "sqp_max_iter": 5, "gdm_iterations": 5}))
    return path


def test_generate_writes_trajectories_manifest_and_config(data_dir):
    files = sorted(data_dir.glob("traj_*.csv"))
    assert len(files) == 4
    trajectories = [tr for f in files for tr in load_trajectories(f)]
    assert all(len(tr) == 30 for tr in trajectories)
    manifest = SplitManifest.load(data_dir / "manifest.json")
    assert sorted(manifest.train + manifest.val + manifest.test) == [tr.traj_id for tr in trajectories]
    assert PlantConfig.load(data_dir / "plant_config.json") == PlantConfig.load(CONFIGS / "single_zone.json")


def test_train_writes_checkpoint_and_loss_curve(checkpoints, capsys):
    model, meta = load_checkpoint(checkpoints["mlp"], expected_kind="mlp")
    assert model.lags.as_tuple() == (1, 1, 1)
    assert {"plant_config", "train_config", "best_epoch", "val_mse", "test_mse"} <= set(meta)
    curve = pd.read_csv(checkpoints["mlp"].with_name("mlp_loss.csv"))
    assert list(curve["epoch"]) == [1, 2]


def test_train_prints_a_summary(data_dir, tmp_path, capsys):
    code = main(["train", "--data", str(data_dir), "--model", "linear", "--lags", "0,0,0",
                 "--out", str(tmp_path / "m.json"), *TINY])
    assert code == 0
    out = capsys.readouterr().out
    assert "TRAIN: linear lags=0,0,0" in out
    assert "MSE (x1e-5)" in out


def test_unknown_model_is_a_usage_error(data_dir, tmp_path, capsys):
    code = main(["train", "--data", str(data_dir), "--model", "gru", "--lags", "1,1,1", "--out", str(tmp_path / "m.json")])
    assert code == 2
    assert "ERROR:" in capsys.readouterr().err


def test_bad_lags_are_a_usage_error(data_dir, tmp_path):
    code = main(["train", "--data", str(data_dir), "--model", "mlp", "--lags", "1,x,1", "--out", str(tmp_path / "m.json")])
    assert code == 2


def test_missing_inputs_are_usage_errors(tmp_path, capsys):
    assert main(["generate", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "d")]) == 2
    assert "Missing required inputs" in capsys.readouterr().err
    assert main(["train", "--data", str(tmp_path), "--model", "mlp", "--lags", "1,1,1", "--out", str(tmp_path / "m")]) == 2
    assert main([]) == 2


def test_lagstudy_covers_the_lag_grid(data_dir, tmp_path, capsys):
    out = tmp_path / "lags"
    assert main(["lagstudy", "--data", str(data_dir), "--out", str(out), "--horizon", "3", *TINY]) == 0
    frame = pd.read_csv(out / "lag_study.csv")
    assert list(frame.columns) == ["m_x", "m_u", "m_d", "train_mse", "val_mse", "test_mse"]
    assert set(zip(frame["m_x"], frame["m_u"], frame["m_d"])) == {
        (a, b, c) for a in (1, 5) for b in (1, 5) for c in (1, 5)
    }


def test_eval_writes_rollouts(checkpoints, data_dir, tmp_path, capsys):
    out = tmp_path / "rollout.csv"
    code = main(["eval", "--ckpt", str(checkpoints["lstm"]), "--data", str(data_dir), "--horizon", "5",
                 "--split", "train", "--out", str(out)])
    assert code == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["start_t", "step", "channel", "predicted", "true"]
    assert frame["step"].max() == 5
    assert "EVAL: lstm train horizon=5" in capsys.readouterr().out


def test_eval_rejects_a_zero_horizon(checkpoints, data_dir):
    assert main(["eval", "--ckpt", str(checkpoints["mlp"]), "--data", str(data_dir), "--horizon", "0"]) == 2


def test_mpc_runs_an_episode(checkpoints, mpc_config, tmp_path):
    out = tmp_path / "mpc"
    code = main(["mpc", "--ckpt", str(checkpoints["mlp"]), "--solver", "sqp", "--days", "0.05",
                 "--mpc-config", str(mpc_config), "--out", str(out)])
    assert code == 0
    results = pd.read_csv(out / "results.csv")
    assert list(results.columns) == RESULT_COLUMNS
    assert results.loc[0, "model"] == "mlp" and results.loc[0, "solver"] == "sqp"
    episode = pd.read_csv(out / "episode_mlp_sqp.csv")
    assert len(episode) == 5
    assert (out / "kpi_mlp_sqp.json").is_file()


def test_sweep_covers_every_model_and_solver(checkpoints, mpc_config, tmp_path):
    out = tmp_path / "sweep"
    args = ["mpc", "--sweep", "--days", "0.02", "--mpc-config", str(mpc_config), "--out", str(out)]
    for path in checkpoints.values():
        args += ["--ckpt", str(path)]
    assert main(args) == 0
    results = pd.read_csv(out / "results.csv")
    assert len(results) == 6
    assert set(zip(results["model"], results["solver"])) == {
        (m, s) for m in ("linear", "mlp", "lstm") for s in ("gdm", "sqp")
    }


def test_mpc_rejects_a_model_for_another_plant(checkpoints, mpc_config, tmp_path):
    code = main(["mpc", "--ckpt", str(checkpoints["mlp"]), "--config", str(CONFIGS / "five_zone.json"),
                 "--mpc-config", str(mpc_config), "--out", str(tmp_path / "mpc")])
    assert code == 2


def test_report_prints_results_and_writes_plot_data(checkpoints, mpc_config, tmp_path, capsys):
    out = tmp_path / "mpc"
    assert main(["mpc", "--ckpt", str(checkpoints["linear"]), "--solver", "gdm", "--days", "0.02",
                 "--mpc-config", str(mpc_config), "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["report", "--results", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "power_kwh_m2" in printed and "linear" in printed
    plot = pd.read_csv(out / "plot_linear_gdm.csv")
    assert {"t_sec", "zone_temp", "lower", "upper", "u_0", "u_1", "ambient"} <= set(plot.columns)


def test_report_needs_result_rows(tmp_path):
    assert main(["report", "--results", str(tmp_path)]) == 2
    (tmp_path / "results.csv").write_text(",".join(RESULT_COLUMNS) + "\n")
    assert main(["report", "--results", str(tmp_path)]) == 2


def test_report_lists_the_lowest_power_first(tmp_path, capsys):
    append_result(tmp_path / "results.csv", "lstm", "sqp", KpiReport(total_power=0.9, discomfort=0.0))
    append_result(tmp_path / "results.csv", "mlp", "sqp", KpiReport(total_power=0.1, discomfort=0.0))
    assert main(["report", "--results", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    first = lambda name: next(i for i, line in enumerate(lines) if name in line)  # noqa: E731
    assert first("mlp") < first("lstm")


def test_same_named_checkpoints_keep_separate_outputs(checkpoints, mpc_config, tmp_path):
    for sub in ("a", "b"):
        (tmp_path / sub).mkdir()
        shutil.copy(checkpoints["mlp"], tmp_path / sub / "mlp.json")
    out = tmp_path / "mpc"
    code = main(["mpc", "--ckpt", str(tmp_path / "a" / "mlp.json"), "--ckpt", str(tmp_path / "b" / "mlp.json"),
                 "--solver", "gdm", "--days", "0.02", "--mpc-config", str(mpc_config), "--out", str(out)])
    assert code == 0
    assert (out / "episode_mlp_0_gdm.csv").is_file() and (out / "episode_mlp_1_gdm.csv").is_file()
    assert (out / "kpi_mlp_0_gdm.json").is_file() and (out / "kpi_mlp_1_gdm.json").is_file()
    assert len(pd.read_csv(out / "results.csv")) == 2


def _generate(out: Path) -> None:
    assert main(["generate", "--config", str(CONFIGS / "single_zone.json"), "--out", str(out), "--count", "3",
                 "--steps", "20", "--seed", "5", "--workers", "2"]) == 0


def test_generate_is_byte_identical_for_a_seed(tmp_path):
    _generate(tmp_path / "a")
    _generate(tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_full_chain_reproduces_its_kpi_rows(mpc_config, tmp_path):
    rows = []
    for run in ("first", "second"):
        root = tmp_path / run
        _generate(root / "data")
        assert main(["train", "--data", str(root / "data"), "--model", "linear", "--lags", "1,1,1",
                     "--out", str(root / "linear.json"), *TINY]) == 0
        assert main(["mpc", "--ckpt", str(root / "linear.json"), "--solver", "gdm", "--days", "0.02",
                     "--mpc-config", str(mpc_config), "--out", str(root / "mpc")]) == 0
        rows.append(pd.read_csv(root / "mpc" / "results.csv").drop(columns=["mean_s", "max_s"]))
    pd.testing.assert_frame_equal(rows[0], rows[1])


def test_pipeline_script_runs_from_the_repository_root():
    done = subprocess.run(
        [sys.executable, "-m", "scripts.run_pipeline", "--help"], cwd=ROOT, capture_output=True, text=True
    )
    assert done.returncode == 0, done.stderr
    assert "--mpc-config" in done.stdout
