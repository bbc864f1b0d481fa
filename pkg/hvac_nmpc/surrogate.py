from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import ClassVar, Sequence

import numpy as np

from hvac_nmpc import diff
from hvac_nmpc.dataio import LagSpec, Normalizer
from hvac_nmpc.diff import Tape, Tensor
from hvac_nmpc.errors import ConfigError, ContractError, ShapeError
from hvac_nmpc.trajectory import Trajectory

Carry = tuple[Tensor, Tensor] | None


@dataclass(frozen=True, eq=False)
class SurrogateModel:
    """
    Base for the differentiable plant proxies. Inputs are raw-unit lag windows; the model
    normalizes internally and works on x | u | d windows ordered oldest first.
    """
    kind: ClassVar[str] = ""

    lags: LagSpec
    normalizer: Normalizer
    n_x: int
    n_u: int
    n_d: int
    params: dict[str, np.ndarray]
    width: int = 0
    depth: int = 0

    def __post_init__(self) -> None:
        expected = self.param_shapes()
        if set(self.params) != set(expected):
            raise ShapeError(f"{self.kind} parameter names", tuple(sorted(self.params)), tuple(sorted(expected)))
        frozen = {}
        for name, shape in expected.items():
            arr = np.array(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{self.kind} parameter {name}", arr.shape, shape)
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "params", frozen)

    @property
    def input_width(self) -> int:
        return self.lags.width(self.n_x, self.n_u, self.n_d)

    @property
    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        raise NotImplementedError

    def forward(self, tape: Tape, p: dict[str, Tensor], z: Tensor, carry: Carry = None) -> tuple[Tensor, Carry]:
        """One step on a normalized (batch, input_width) window. Returns normalized x_{t+1}."""
        raise NotImplementedError

    def with_params(self, params: dict[str, np.ndarray]) -> "SurrogateModel":
        return dataclasses.replace(self, params=params)

    def bind(self, tape: Tape, trainable: bool = False) -> dict[str, Tensor]:
        make = tape.variable if trainable else tape.constant
        return {name: make(value) for name, value in self.params.items()}


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True, eq=False)
class LinearModel(SurrogateModel):
    """x_{t+1} = sum_k A_k x_{t-k} + sum_k B_k u_{t-k} + sum_k C_k d_{t-k} + bias (normalized space)."""
    kind: ClassVar[str] = "linear"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for k in range(self.lags.m_x + 1):
            shapes[f"A_{k}"] = (self.n_x, self.n_x)
        for k in range(self.lags.m_u + 1):
            shapes[f"B_{k}"] = (self.n_x, self.n_u)
        for k in range(self.lags.m_d + 1):
            shapes[f"C_{k}"] = (self.n_x, self.n_d)
        shapes["bias"] = (self.n_x,)
        return shapes

    @staticmethod
    def init_params(lags: LagSpec, n_x: int, n_u: int, n_d: int, rng: np.random.Generator, **_) -> dict[str, np.ndarray]:
        fan_in = lags.width(n_x, n_u, n_d)
        params: dict[str, np.ndarray] = {}
        for k in range(lags.m_x + 1):
            params[f"A_{k}"] = _uniform(rng, (n_x, n_x), fan_in)
        for k in range(lags.m_u + 1):
            params[f"B_{k}"] = _uniform(rng, (n_x, n_u), fan_in)
        for k in range(lags.m_d + 1):
            params[f"C_{k}"] = _uniform(rng, (n_x, n_d), fan_in)
        params["bias"] = np.zeros(n_x)
        return params

    def forward(self, tape: Tape, p: dict[str, Tensor], z: Tensor, carry: Carry = None) -> tuple[Tensor, Carry]:
        # Window is oldest first, so the lag-k matrix multiplies block (M - k).
        blocks = (
            [p[f"A_{k}"] for k in reversed(range(self.lags.m_x + 1))]
            + [p[f"B_{k}"] for k in reversed(range(self.lags.m_u + 1))]
            + [p[f"C_{k}"] for k in reversed(range(self.lags.m_d + 1))]
        )
        return diff.affine(z, diff.concat(blocks, axis=1), p["bias"]), None


@dataclass(frozen=True, eq=False)
class MlpModel(SurrogateModel):
    """depth tanh layers of `width` units and a linear output layer."""
    kind: ClassVar[str] = "mlp"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        sizes = [self.input_width] + [self.width] * self.depth + [self.n_x]
        shapes: dict[str, tuple[int, ...]] = {}
        for k in range(self.depth + 1):
            shapes[f"W{k}"] = (sizes[k + 1], sizes[k])
            shapes[f"b{k}"] = (sizes[k + 1],)
        return shapes

    @staticmethod
    def init_params(
        lags: LagSpec, n_x: int, n_u: int, n_d: int, rng: np.random.Generator, *, width: int, depth: int
    ) -> dict[str, np.ndarray]:
        sizes = [lags.width(n_x, n_u, n_d)] + [width] * depth + [n_x]
        params: dict[str, np.ndarray] = {}
        for k in range(depth + 1):
            params[f"W{k}"] = _uniform(rng, (sizes[k + 1], sizes[k]), sizes[k])
            params[f"b{k}"] = _uniform(rng, (sizes[k + 1],), sizes[k])
        return params

    def forward(self, tape: Tape, p: dict[str, Tensor], z: Tensor, carry: Carry = None) -> tuple[Tensor, Carry]:
        h = z
        for k in range(self.depth):
            h = diff.tanh(diff.affine(h, p[f"W{k}"], p[f"b{k}"]))
        return diff.affine(h, p[f"W{self.depth}"], p[f"b{self.depth}"]), None


_GATES = ("i", "f", "g", "o")


def lstm_cell(p: dict[str, Tensor], u: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """
    Standard LSTM update, every gate reads h_{t-1}:
        i, f, o = sigmoid(W_i* u + b_i* + W_h* h + b_h*),  g = tanh(...)
        c' = f * c + i * g,  h' = o * tanh(c')
    """
    def gate(name: str) -> Tensor:
        pre = diff.affine(u, p[f"W_i{name}"], p[f"b_i{name}"]) + diff.affine(h, p[f"W_h{name}"], p[f"b_h{name}"])
        return diff.tanh(pre) if name == "g" else diff.sigmoid(pre)

    i, f, g, o = (gate(name) for name in _GATES)
    c_next = f * c + i * g
    return o * diff.tanh(c_next), c_next


@dataclass(frozen=True, eq=False)
class LstmModel(SurrogateModel):
    """
    Encoder MLP maps the lag window without u_t to (h, c); one gate update consumes u_t;
    decoder MLP maps h to x_{t+1}. During rollout (h, c) is carried, not re-encoded.
    `width` is both the hidden/cell size and the encoder/decoder width.
    """
    kind: ClassVar[str] = "lstm"

    @property
    def encoder_width(self) -> int:
        return self.input_width - self.n_u

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        w = self.width
        shapes: dict[str, tuple[int, ...]] = {
            "enc_W0": (w, self.encoder_width),
            "enc_b0": (w,),
            "enc_W1": (2 * w, w),
            "enc_b1": (2 * w,),
        }
        for name in _GATES:
            shapes[f"W_i{name}"] = (w, self.n_u)
            shapes[f"b_i{name}"] = (w,)
            shapes[f"W_h{name}"] = (w, w)
            shapes[f"b_h{name}"] = (w,)
        shapes.update({"dec_W0": (w, w), "dec_b0": (w,), "dec_W1": (self.n_x, w), "dec_b1": (self.n_x,)})
        return shapes

    @staticmethod
    def init_params(
        lags: LagSpec, n_x: int, n_u: int, n_d: int, rng: np.random.Generator, *, width: int, **_
    ) -> dict[str, np.ndarray]:
        w = width
        enc_in = lags.width(n_x, n_u, n_d) - n_u
        params = {
            "enc_W0": _uniform(rng, (w, enc_in), enc_in),
            "enc_b0": _uniform(rng, (w,), enc_in),
            "enc_W1": _uniform(rng, (2 * w, w), w),
            "enc_b1": _uniform(rng, (2 * w,), w),
        }
        for name in _GATES:
            params[f"W_i{name}"] = _uniform(rng, (w, n_u), w)
            params[f"b_i{name}"] = _uniform(rng, (w,), w)
            params[f"W_h{name}"] = _uniform(rng, (w, w), w)
            params[f"b_h{name}"] = _uniform(rng, (w,), w)
        params["dec_W0"] = _uniform(rng, (w, w), w)
        params["dec_b0"] = _uniform(rng, (w,), w)
        params["dec_W1"] = _uniform(rng, (n_x, w), w)
        params["dec_b1"] = _uniform(rng, (n_x,), w)
        return params

    def encode(self, p: dict[str, Tensor], z: Tensor) -> tuple[Tensor, Tensor]:
        x_end = (self.lags.m_x + 1) * self.n_x
        u_end = x_end + (self.lags.m_u + 1) * self.n_u
        pieces = [diff.slice(z, 0, x_end)]
        if self.lags.m_u > 0:
            pieces.append(diff.slice(z, x_end, u_end - self.n_u))
        pieces.append(diff.slice(z, u_end, self.input_width))
        e = diff.tanh(diff.affine(diff.concat(pieces, axis=-1), p["enc_W0"], p["enc_b0"]))
        hc = diff.affine(e, p["enc_W1"], p["enc_b1"])
        return diff.slice(hc, 0, self.width), diff.slice(hc, self.width, 2 * self.width)

    def forward(self, tape: Tape, p: dict[str, Tensor], z: Tensor, carry: Carry = None) -> tuple[Tensor, Carry]:
        h, c = self.encode(p, z) if carry is None else carry
        u_end = (self.lags.m_x + 1) * self.n_x + (self.lags.m_u + 1) * self.n_u
        h, c = lstm_cell(p, diff.slice(z, u_end - self.n_u, u_end), h, c)
        out = diff.affine(diff.tanh(diff.affine(h, p["dec_W0"], p["dec_b0"])), p["dec_W1"], p["dec_b1"])
        return out, (h, c)


MODEL_KINDS: dict[str, type[SurrogateModel]] = {cls.kind: cls for cls in (LinearModel, MlpModel, LstmModel)}


def build_model(
    kind: str,
    lags: LagSpec,
    normalizer: Normalizer,
    n_x: int,
    n_u: int,
    n_d: int,
    *,
    width: int = 64,
    depth: int = 4,
    seed: int = 0,
) -> SurrogateModel:
    """Fresh model with weights uniform in +-1/sqrt(fan_in) drawn from `seed`."""
    cls = MODEL_KINDS.get(kind)
    if cls is None:
        raise ConfigError(f"Unknown model kind '{kind}'. Use one of: {', '.join(MODEL_KINDS)}.")
    if kind == "linear":
        width, depth = 0, 0
    elif kind == "lstm":
        depth = 0
    rng = np.random.default_rng(seed)
    params = cls.init_params(lags, n_x, n_u, n_d, rng, width=width, depth=depth)
    return cls(lags=lags, normalizer=normalizer, n_x=n_x, n_u=n_u, n_d=n_d, params=params, width=width, depth=depth)


# ---- history and rollout ----

@dataclass(frozen=True)
class History:
    """
    Past context for a rollout starting at t: x rows t-M_x..t, u rows t-M_u..t-1, d rows t-M_d..t-1.
    An optional leading batch axis is allowed on all three.
    """
    x: np.ndarray
    u: np.ndarray
    d: np.ndarray

    @classmethod
    def from_trajectory(cls, traj: Trajectory, t: int, lags: LagSpec) -> "History":
        if t < lags.max_lag or t >= len(traj):
            raise ContractError(f"History at t={t} needs {lags.max_lag} <= t < {len(traj)}")
        return cls(
            x=traj.x[t - lags.m_x : t + 1],
            u=traj.u[t - lags.m_u : t],
            d=traj.d[t - lags.m_d : t],
        )

    @classmethod
    def from_rows(cls, x_rows, u_rows, d_rows, lags: LagSpec) -> "History":
        """Trailing rows of recorded sequences; x_rows ends at x_t, u/d rows end at t-1."""
        x = np.asarray(x_rows, dtype=np.float64)
        u = np.asarray(u_rows, dtype=np.float64)
        d = np.asarray(d_rows, dtype=np.float64)
        if len(x) < lags.m_x + 1 or len(u) < lags.m_u or len(d) < lags.m_d:
            raise ContractError(
                f"History needs {lags.m_x + 1} x rows, {lags.m_u} u rows and {lags.m_d} d rows; "
                f"got {len(x)}, {len(u)}, {len(d)}"
            )
        return cls(
            x=x[len(x) - lags.m_x - 1 :],
            u=u[len(u) - lags.m_u :] if lags.m_u else u[:0],
            d=d[len(d) - lags.m_d :] if lags.m_d else d[:0],
        )

    def check(self, model: SurrogateModel) -> None:
        lags = model.lags
        for name, arr, rows, width in (
            ("x", self.x, lags.m_x + 1, model.n_x),
            ("u", self.u, lags.m_u, model.n_u),
            ("d", self.d, lags.m_d, model.n_d),
        ):
            if arr.ndim not in (2, 3) or arr.shape[-2:] != (rows, width):
                raise ShapeError(f"history.{name}", arr.shape, (rows, width))


def _constant_rows(tape: Tape, rows: np.ndarray, batch: int) -> list[Tensor]:
    """(L, n) or (B, L, n) -> L constants of shape (B, n)."""
    out = []
    for k in range(rows.shape[-2]):
        row = rows[..., k, :]
        out.append(tape.constant(np.broadcast_to(row, (batch, row.shape[-1]))))
    return out


def _normalize(tape: Tape, v: Tensor, mean: np.ndarray, std: np.ndarray) -> Tensor:
    return diff.hadamard(diff.sub(v, tape.constant(mean)), tape.constant(1.0 / std))


def rollout_on_tape(
    model: SurrogateModel,
    tape: Tape,
    p: dict[str, Tensor],
    history: History,
    controls: Sequence[Tensor],
    disturbances: Sequence[Tensor],
) -> list[Tensor]:
    """
    Differentiable H-step rollout. controls / disturbances are H tensors of shape (B, n_u) / (B, n_d)
    in raw units; returns H raw-unit state tensors (B, n_x). Predictions are fed back normalized.
    """
    horizon = len(controls)
    if horizon == 0:
        raise ContractError("rollout horizon must be >= 1")
    if len(disturbances) != horizon:
        raise ShapeError("rollout disturbances", (len(disturbances),), (horizon,))
    history.check(model)
    batch = controls[0].shape[0]
    norm, lags = model.normalizer, model.lags

    xs = _constant_rows(tape, norm.apply("x", history.x), batch)
    us = _constant_rows(tape, norm.apply("u", history.u), batch)
    ds = _constant_rows(tape, norm.apply("d", history.d), batch)

    outputs: list[Tensor] = []
    carry: Carry = None
    for k in range(horizon):
        if controls[k].shape != (batch, model.n_u):
            raise ShapeError("rollout control", controls[k].shape, (batch, model.n_u))
        if disturbances[k].shape != (batch, model.n_d):
            raise ShapeError("rollout disturbance", disturbances[k].shape, (batch, model.n_d))
        us.append(_normalize(tape, controls[k], norm.u_mean, norm.u_std))
        ds.append(_normalize(tape, disturbances[k], norm.d_mean, norm.d_std))

        pieces = xs[len(xs) - lags.m_x - 1 :] + us[len(us) - lags.m_u - 1 :] + ds[len(ds) - lags.m_d - 1 :]
        z = diff.concat(pieces, axis=1)
        x_next, carry = model.forward(tape, p, z, carry)
        xs.append(x_next)
        outputs.append(diff.hadamard(x_next, tape.constant(norm.x_std)) + tape.constant(norm.x_mean))
    return outputs


def rollout(model: SurrogateModel, history: History, controls: np.ndarray, disturbances: np.ndarray) -> np.ndarray:
    """
    Numeric rollout. controls (H, n_u) and disturbances (H, n_d), or with a leading batch axis
    (the history may be batched the same way). Returns (H, n_x) or (B, H, n_x).
    """
    u = np.asarray(controls, dtype=np.float64)
    d = np.asarray(disturbances, dtype=np.float64)
    batched = u.ndim == 3
    if not batched:
        u, d = u[None], d[None]
    if u.ndim != 3 or d.ndim != 3 or u.shape[:2] != d.shape[:2]:
        raise ShapeError("rollout controls/disturbances", np.shape(controls), np.shape(disturbances))
    if u.shape[1] == 0:
        raise ContractError("rollout horizon must be >= 1")

    tape = Tape()
    p = model.bind(tape)
    outs = rollout_on_tape(
        model,
        tape,
        p,
        history,
        [tape.constant(u[:, k]) for k in range(u.shape[1])],
        [tape.constant(d[:, k]) for k in range(d.shape[1])],
    )
    result = np.stack([o.value for o in outs], axis=1)
    return result if batched else result[0]


def predict_one(model: SurrogateModel, x_window: np.ndarray, u_window: np.ndarray, d_window: np.ndarray) -> np.ndarray:
    """x_{t+1} from raw windows x[t-M_x..t], u[t-M_u..t], d[t-M_d..t]."""
    lags = model.lags
    x_window, u_window, d_window = (np.asarray(w, dtype=np.float64) for w in (x_window, u_window, d_window))
    for name, w, rows, width in (
        ("x_window", x_window, lags.m_x + 1, model.n_x),
        ("u_window", u_window, lags.m_u + 1, model.n_u),
        ("d_window", d_window, lags.m_d + 1, model.n_d),
    ):
        if w.shape != (rows, width):
            raise ShapeError(f"predict_one {name}", w.shape, (rows, width))
    history = History(x=x_window, u=u_window[:-1], d=d_window[:-1])
    return rollout(model, history, u_window[-1:], d_window[-1:])[0]


def predict_windows(model: SurrogateModel, inputs: np.ndarray) -> np.ndarray:
    """One-step predictions (raw units) for a batch of raw flattened windows."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != model.input_width:
        raise ShapeError("predict_windows", inputs.shape, (len(inputs), model.input_width))
    mean, std = model.normalizer.window_stats(model.lags)
    tape = Tape()
    out, _ = model.forward(tape, model.bind(tape), tape.constant((inputs - mean) / std))
    return model.normalizer.invert("x", out.value)
