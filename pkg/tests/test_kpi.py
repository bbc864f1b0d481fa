from __future__ import annotations

import numpy as np
import pytest

from hvac_nmpc.config import PlantConfig
from hvac_nmpc.errors import ConfigError, ContractError, InvalidArgumentError, ShapeError
from hvac_nmpc.kpi import (
    RESULT_COLUMNS,
    KpiReport,
    append_result,
    discomfort,
    energy,
    kpi_report,
    load_results,
    timing,
)
from hvac_nmpc.trajectory import Trajectory

DT = 900.0


def _traj(x: np.ndarray, start: float = 0.0) -> Trajectory:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    return Trajectory(x=x, u=np.zeros((n, 1)), d=np.zeros((n, 1)), t=start + DT * np.arange(n))


def _band(n: int, lo: float = 21.0, hi: float = 24.0, zones: int = 1) -> tuple[np.ndarray, np.ndarray]:
    return np.full((n, zones), lo), np.full((n, zones), hi)


def test_two_hours_one_kelvin_too_warm():
    assert discomfort(_traj(np.full(8, 25.0)), *_band(8)) == pytest.approx(2.0)


def test_half_hour_one_kelvin_too_cold():
    assert discomfort(_traj(np.full(2, 20.0)), *_band(2)) == pytest.approx(0.5)


def test_in_band_is_comfortable():
    assert discomfort(_traj([21.0, 22.5, 24.0]), *_band(3)) == 0.0


def test_discomfort_averages_over_zones():
    x = np.column_stack([np.full(4, 25.0), np.full(4, 18.0)])
    value = discomfort(_traj(x), *_band(4, zones=2), zones=slice(0, 2))
    assert value == pytest.approx((1.0 + 3.0) / 2)


def test_discomfort_is_additive_over_consecutive_pieces():
    temps = np.random.default_rng(0).uniform(15.0, 30.0, 20)
    whole = discomfort(_traj(temps), *_band(20))
    first = discomfort(_traj(temps[:12]), *_band(12))
    second = discomfort(_traj(temps[12:], start=12 * DT), *_band(8))
    assert whole == pytest.approx(first + second, rel=1e-12)


def test_mask_keeps_only_selected_steps():
    temps = np.full(4, 26.0)
    mask = np.array([True, False, False, True])
    assert discomfort(_traj(temps), *_band(4), mask=mask) == pytest.approx(2 * 2.0 * 0.25)


def test_discomfort_schedule_shape_must_match():
    with pytest.raises(ShapeError):
        discomfort(_traj(np.full(4, 22.0)), *_band(3))


def test_two_kilowatts_for_three_hours_over_fifty_square_metres():
    x = np.column_stack([np.full(12, 22.0), np.full(12, 2.0)])
    assert energy(_traj(x), 50.0, [1]) == pytest.approx(0.12)


def test_energy_sums_the_selected_channels():
    x = np.column_stack([np.full(4, 22.0), np.full(4, 1.0), np.full(4, 3.0)])
    assert energy(_traj(x), 10.0, [1, 2]) == pytest.approx(4.0 * 1.0 / 10.0)
    assert energy(_traj(x), 10.0, [2]) == pytest.approx(3.0 / 10.0)


def test_energy_needs_a_floor_area():
    with pytest.raises(InvalidArgumentError):
        energy(_traj(np.ones(2)), 0.0, [0])


def test_timing():
    assert timing([1.0, 3.0]) == (2.0, 3.0)
    with pytest.raises(ContractError):
        timing([])


def test_report_looks_up_bounds_at_each_timestamp():
    config = PlantConfig.single_zone()
    # Four steps from 07:30: two unoccupied (15-30), two occupied (21-24); 20 C is only uncomfortable once occupied.
    n = 4
    x = np.column_stack([np.full(n, 20.0), np.full(n, 1.0), np.zeros(n), np.full(n, 0.5)])
    outcome = Trajectory(x=x, u=np.zeros((n, 2)), d=np.zeros((n, 3)), t=7.5 * 3600 + DT * np.arange(n))
    report = kpi_report(outcome, config, wall_times=[0.1, 0.3], violation_steps=1)
    assert report.discomfort == pytest.approx(2 * 0.25)
    assert report.occupied_discomfort == pytest.approx(2 * 0.25)
    assert report.total_power == pytest.approx(n * 1.5 * 0.25 / config.floor_area)
    assert (report.mean_solve_time, report.max_solve_time) == pytest.approx((0.2, 0.3))
    assert report.steps == n and report.violation_steps == 1

    heating_only = kpi_report(outcome, config, power_channels=["heating"])
    assert heating_only.total_power == pytest.approx(n * 1.0 * 0.25 / config.floor_area)


def test_report_rejects_a_foreign_state_layout():
    with pytest.raises(ConfigError):
        kpi_report(_traj(np.full(3, 22.0)), PlantConfig.single_zone())


def test_results_file_appends_rows_under_one_header(tmp_path):
    path = tmp_path / "results.csv"
    append_result(path, "mlp", "sqp", KpiReport(total_power=0.5, discomfort=1.25, mean_solve_time=0.1, max_solve_time=0.2))
    append_result(path, "lstm", "gdm", KpiReport(total_power=0.4, discomfort=2.0))
    table = load_results(path)
    assert list(table.columns) == RESULT_COLUMNS
    assert list(table["model"]) == ["mlp", "lstm"]
    assert table.loc[0, "discomfort_kh"] == 1.25
    assert path.read_text().count("power_kwh_m2") == 1


def test_results_with_a_foreign_header_are_rejected(tmp_path):
    path = tmp_path / "results.csv"
    path.write_text("model,solver,power\nmlp,sqp,1.0\n")
    with pytest.raises(ConfigError):
        load_results(path)


def test_report_file_round_trip(tmp_path):
    report = KpiReport(total_power=0.3, discomfort=0.0, steps=96)
    report.save(tmp_path / "kpi.json")
    assert KpiReport.model_validate_json((tmp_path / "kpi.json").read_text()) == report
