from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from hvac_nmpc.errors import ContractError, CsvFormatError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def _matrix(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"Trajectory.{name} must be 2-D (steps x channels), got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Trajectory:
    """
    Time-aligned (x, u, d) record: u[t] is the control that drove x[t] to x[t+1].
    """
    x: np.ndarray
    u: np.ndarray
    d: np.ndarray
    t: np.ndarray
    traj_id: int = 0
    clamped_steps: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", _matrix(self.x, "x"))
        object.__setattr__(self, "u", _matrix(self.u, "u"))
        object.__setattr__(self, "d", _matrix(self.d, "d"))
        t = np.array(self.t, dtype=np.float64).reshape(-1)
        t.setflags(write=False)
        object.__setattr__(self, "t", t)

        n = len(t)
        if not (len(self.x) == len(self.u) == len(self.d) == n):
            raise ContractError(
                f"Trajectory lengths differ: x={len(self.x)} u={len(self.u)} d={len(self.d)} t={n}"
            )
        if n >= 2:
            dt = np.diff(t)
            if not (dt[0] > 0 and np.all(dt == dt[0])):
                raise ContractError("Trajectory timestamps must increase by a constant sample period")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def n_x(self) -> int:
        return self.x.shape[1]

    @property
    def n_u(self) -> int:
        return self.u.shape[1]

    @property
    def n_d(self) -> int:
        return self.d.shape[1]

    @property
    def sample_period(self) -> float | None:
        if len(self.t) < 2:
            return None
        return float(self.t[1] - self.t[0])

    def step_hours(self, default_period: float | None = None) -> np.ndarray:
        """Per-step duration in hours; the last step reuses the previous spacing."""
        n = len(self.t)
        if n == 0:
            return np.zeros(0)
        period = self.sample_period or default_period
        if period is None:
            raise ContractError("Single-step trajectory needs an explicit sample period")
        dt = np.empty(n)
        dt[:-1] = np.diff(self.t)
        dt[-1] = period
        return dt / 3600.0

    def head(self, steps: int) -> "Trajectory":
        return Trajectory(self.x[:steps], self.u[:steps], self.d[:steps], self.t[:steps], traj_id=self.traj_id)

    def tail(self, start: int) -> "Trajectory":
        return Trajectory(self.x[start:], self.u[start:], self.d[start:], self.t[start:], traj_id=self.traj_id)

    @classmethod
    def empty(cls, n_x: int, n_u: int, n_d: int, traj_id: int = 0) -> "Trajectory":
        return cls(np.zeros((0, n_x)), np.zeros((0, n_u)), np.zeros((0, n_d)), np.zeros(0), traj_id=traj_id)


def _header(n_x: int, n_u: int, n_d: int) -> list[str]:
    return (
        ["traj_id", "t_sec"]
        + [f"x_{i}" for i in range(n_x)]
        + [f"u_{i}" for i in range(n_u)]
        + [f"d_{i}" for i in range(n_d)]
    )


def save_trajectories(path: str | Path, trajectories: list[Trajectory]) -> None:
    """Write trajectories as one CSV: traj_id,t_sec,x_0..,u_0..,d_0.. (17 significant digits)."""
    if not trajectories:
        Path(path).write_text("traj_id,t_sec\n", encoding="utf-8")
        return

    first = trajectories[0]
    shape = (first.n_x, first.n_u, first.n_d)
    frames = []
    for tr in trajectories:
        if (tr.n_x, tr.n_u, tr.n_d) != shape:
            raise ContractError(f"Trajectory {tr.traj_id} channel counts differ from trajectory {first.traj_id}")
        body = np.column_stack([tr.t, tr.x, tr.u, tr.d]) if len(tr) else np.zeros((0, 1 + sum(shape)))
        frame = pd.DataFrame(body, columns=_header(*shape)[1:])
        frame.insert(0, "traj_id", np.full(len(tr), tr.traj_id, dtype=np.int64))
        frames.append(frame)

    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def _channel_count(columns: list[str], prefix: str, start: int) -> int:
    count = 0
    while start + count < len(columns) and columns[start + count] == f"{prefix}_{count}":
        count += 1
    return count


_LINE_RE = re.compile(r"line (\d+)")


def load_trajectories(path: str | Path) -> list[Trajectory]:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise CsvFormatError("file is empty, expected a header", line=1) from e
    except pd.errors.ParserError as e:
        m = _LINE_RE.search(str(e))
        raise CsvFormatError(f"malformed row: {e}", line=int(m.group(1)) if m else 0) from e

    columns = list(frame.columns)
    if columns[:2] != ["traj_id", "t_sec"]:
        raise CsvFormatError("header must start with traj_id,t_sec", line=1)
    n_x = _channel_count(columns, "x", 2)
    n_u = _channel_count(columns, "u", 2 + n_x)
    n_d = _channel_count(columns, "d", 2 + n_x + n_u)
    if columns != _header(n_x, n_u, n_d):
        raise CsvFormatError(
            "header must be traj_id,t_sec,x_0..x_{n-1},u_0..,d_0.. with no gaps or extra columns", line=1
        )
    if len(frame) == 0:
        return []
    if n_x == 0 or n_u == 0 or n_d == 0:
        raise CsvFormatError("header declares no x, u or d channels", line=1)

    values = np.empty((len(frame), len(columns)), dtype=np.float64)
    for j, col in enumerate(columns):
        cells = frame[col].to_numpy()
        try:
            # numpy's str -> float conversion is correctly rounded, so %.17g text reads back bit-exact.
            values[:, j] = cells.astype(np.float64)
        except (TypeError, ValueError):
            for i, cell in enumerate(cells):
                try:
                    float(cell)
                except (TypeError, ValueError):
                    raise CsvFormatError(f"column {col}: cannot parse '{cell}'", line=i + 2) from None
        bad = ~np.isfinite(values[:, j])
        if bad.any():
            row = int(np.argmax(bad))
            raise CsvFormatError(f"column {col}: missing or non-finite value", line=row + 2)

    ids = values[:, 0]
    if not np.all(ids == np.round(ids)):
        row = int(np.argmax(ids != np.round(ids)))
        raise CsvFormatError("traj_id must be an integer", line=row + 2)

    out: list[Trajectory] = []
    order: list[int] = []
    for tid in ids.astype(np.int64):
        if int(tid) not in order:
            order.append(int(tid))
    for tid in order:
        rows = np.flatnonzero(ids == tid)
        block = values[rows]
        try:
            out.append(
                Trajectory(
                    x=block[:, 2 : 2 + n_x],
                    u=block[:, 2 + n_x : 2 + n_x + n_u],
                    d=block[:, 2 + n_x + n_u :],
                    t=block[:, 1],
                    traj_id=tid,
                )
            )
        except ContractError as e:
            raise CsvFormatError(str(e), line=int(rows[0]) + 2) from e

    logger.debug("TRAJ LOAD: %d trajectories from %s", len(out), path)
    return out
