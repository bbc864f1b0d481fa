from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from hvac_nmpc.errors import ContractError, InvalidArgumentError, NumericDomainError, ShapeError

# A pullback maps the upstream gradient of a node to one gradient per parent (None where the parent needs none).
Pullback = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(frozen=True)
class _Record:
    parents: tuple[int, ...]
    pullback: Pullback


class Tape:
    """
    Append-only record of one forward evaluation. Node ids are topologically ordered,
    so backward is a single reverse sweep. Build a fresh tape per forward pass.
    """

    def __init__(self) -> None:
        self._values: list[np.ndarray] = []
        self._requires: list[bool] = []
        self._records: list[_Record | None] = []

    def __len__(self) -> int:
        return len(self._values)

    def _push(self, value: np.ndarray, parents: tuple["Tensor", ...] = (), pullback: Pullback | None = None) -> "Tensor":
        requires = any(p.requires_grad for p in parents)
        value = np.array(value, dtype=np.float64)
        value.setflags(write=False)
        self._values.append(value)
        self._requires.append(requires)
        self._records.append(_Record(tuple(p.id for p in parents), pullback) if requires and pullback else None)
        return Tensor(self, len(self._values) - 1, value, requires)

    def variable(self, value) -> "Tensor":
        t = self._push(_checked("variable", np.asarray(value, dtype=np.float64)))
        self._requires[t.id] = True
        return Tensor(self, t.id, t.value, True)

    def constant(self, value) -> "Tensor":
        return self._push(_checked("constant", np.asarray(value, dtype=np.float64)))

    def value(self, node_id: int) -> np.ndarray:
        return self._values[node_id]


@dataclass(frozen=True, eq=False)
class Tensor:
    tape: Tape
    id: int
    value: np.ndarray
    requires_grad: bool

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scalar_mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.shape}, requires_grad={self.requires_grad})"


def _checked(op: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NumericDomainError(f"{op}: non-finite value produced")
    return value


def _tape_of(op: str, *tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ContractError(f"{op}: tensors come from different tapes")
    return tape


def _row_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[bool, bool]:
    """Same shape, or a 1-D operand matching the trailing axis of a 2-D one. Returns which side broadcasts."""
    if a.shape == b.shape:
        return False, False
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return False, True
    if b.ndim == 2 and a.ndim == 1 and a.shape[0] == b.shape[1]:
        return True, False
    raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, broadcast: bool) -> np.ndarray:
    return g.sum(axis=0) if broadcast else g


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of("add", a, b)
    ba, bb = _row_broadcast("add", a, b)
    out = _checked("add", a.value + b.value)
    return tape._push(out, (a, b), lambda g: (_unbroadcast(g, ba), _unbroadcast(g, bb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of("sub", a, b)
    ba, bb = _row_broadcast("sub", a, b)
    out = _checked("sub", a.value - b.value)
    return tape._push(out, (a, b), lambda g: (_unbroadcast(g, ba), -_unbroadcast(g, bb)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    out = _checked("scalar_mul", a.value * c)
    return a.tape._push(out, (a,), lambda g: (g * c,))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of("hadamard", a, b)
    ba, bb = _row_broadcast("hadamard", a, b)
    av, bv = a.value, b.value
    out = _checked("hadamard", av * bv)
    return tape._push(out, (a, b), lambda g: (_unbroadcast(g * bv, ba), _unbroadcast(g * av, bb)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with 1-D operands promoted to row (left) or column (right) vectors."""
    tape = _tape_of("matmul", a, b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError("matmul", a.shape, b.shape)
    a2 = a.value if a.ndim == 2 else a.value[None, :]
    b2 = b.value if b.ndim == 2 else b.value[:, None]
    if a2.shape[1] != b2.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out2 = a2 @ b2
    out = out2
    if a.ndim == 1:
        out = out[0]
    if b.ndim == 1:
        out = out[..., 0]

    def pullback(g: np.ndarray):
        g2 = np.reshape(g, out2.shape)
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)

    return tape._push(_checked("matmul", out), (a, b), pullback)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x W^T + b, with W stored (out, in). x is (in,) or (batch, in)."""
    tape = _tape_of("affine", x, w, b)
    if w.ndim != 2 or b.shape != (w.shape[0],) or x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ShapeError("affine", x.shape, w.shape, b.shape)
    xv, wv = x.value, w.value
    out = _checked("affine", xv @ wv.T + b.value)

    def pullback(g: np.ndarray):
        gx = g @ wv
        gw = np.outer(g, xv) if xv.ndim == 1 else g.T @ xv
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    return tape._push(out, (x, w, b), pullback)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise InvalidArgumentError("concat: no tensors given")
    tape = _tape_of("concat", *tensors)
    values = [t.value for t in tensors]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as e:
        raise ShapeError("concat", *(v.shape for v in values)) from e
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]
    return tape._push(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise InvalidArgumentError("stack: no tensors given")
    tape = _tape_of("stack", *tensors)
    values = [t.value for t in tensors]
    if any(v.shape != values[0].shape for v in values):
        raise ShapeError("stack", *(v.shape for v in values))
    out = np.stack(values, axis=axis)
    count = len(values)
    return tape._push(out, tuple(tensors), lambda g: tuple(np.take(g, i, axis=axis) for i in range(count)))


def slice(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:  # noqa: A001
    size = a.shape[axis]
    if not (0 <= start <= stop <= size):
        raise ShapeError(f"slice[{start}:{stop}]", a.shape)
    index = [np.s_[:]] * a.ndim
    index[axis] = np.s_[start:stop]
    index = tuple(index)
    out = a.value[index]

    def pullback(g: np.ndarray):
        full = np.zeros_like(a.value)
        full[index] = g
        return (full,)

    return a.tape._push(out, (a,), pullback)


def take(a: Tensor, indices: Sequence[int], axis: int = -1) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ShapeError(f"take{list(idx)}", a.shape)
    out = np.take(a.value, idx, axis=axis)

    def pullback(g: np.ndarray):
        full = np.zeros_like(a.value)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return a.tape._push(out, (a,), pullback)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return a.tape._push(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.value)
    return a.tape._push(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    # Derivative at exactly 0 is taken as 0.
    mask = a.value > 0
    return a.tape._push(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    av = a.value
    return a.tape._push(_checked("square", av * av), (a,), lambda g: (2.0 * av * g,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    av = a.value
    out = np.sum(av, axis=axis)

    def pullback(g: np.ndarray):
        if axis is None:
            return (np.full(av.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),)

    return a.tape._push(_checked("sum", out), (a,), pullback)


def mean(a: Tensor) -> Tensor:
    if a.value.size == 0:
        raise ShapeError("mean", a.shape)
    return scalar_mul(sum(a), 1.0 / a.value.size)


def mse(prediction: Tensor, target: Tensor) -> Tensor:
    if prediction.shape != target.shape:
        raise ShapeError("mse", prediction.shape, target.shape)
    return mean(square(sub(prediction, target)))


def clamp_stopgrad(a: Tensor, lower, upper) -> Tensor:
    """Clip to [lower, upper]; gradient passes only where the input was inside (bounds inclusive)."""
    lo = np.broadcast_to(np.asarray(lower, dtype=np.float64), a.shape)
    hi = np.broadcast_to(np.asarray(upper, dtype=np.float64), a.shape)
    mask = (a.value >= lo) & (a.value <= hi)
    return a.tape._push(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,))


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """
    Reverse sweep from a scalar (size-1) root. Returns gradients keyed by node id
    for every node that requires grad and is reachable from the root.
    """
    if root.tape is not tape:
        raise ContractError("backward: root belongs to a different tape")
    if root.value.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")

    grads: list[np.ndarray | None] = [None] * len(tape)
    if not root.requires_grad:
        return {}
    grads[root.id] = np.ones_like(root.value)

    for node in range(root.id, -1, -1):
        g = grads[node]
        record = tape._records[node]
        if g is None or record is None:
            continue
        for parent, pg in zip(record.parents, record.pullback(g)):
            if pg is None or not tape._requires[parent]:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(tape._values[parent].shape)
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg

    return {i: g for i, g in enumerate(grads) if g is not None and tape._requires[i]}


def value_and_grad(f: Callable[[Tape, Tensor], Tensor], point: np.ndarray) -> tuple[float, np.ndarray]:
    tape = Tape()
    x = tape.variable(point)
    y = f(tape, x)
    grads = backward(tape, y)
    return float(y.value.reshape(())), grads.get(x.id, np.zeros_like(x.value))


def grad_check(f: Callable[[Tape, Tensor], Tensor], point: np.ndarray, eps: float = 1e-6) -> float:
    """
    Largest relative gap between the tape gradient and a central finite difference.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise InvalidArgumentError(f"grad_check: eps must lie in [1e-7, 1e-3], got {eps}")
    point = np.array(point, dtype=np.float64)
    _, g_ad = value_and_grad(f, point)

    def evaluate(p: np.ndarray) -> float:
        tape = Tape()
        return float(f(tape, tape.constant(p)).value.reshape(()))

    g_fd = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += eps
        minus[i] -= eps
        g_fd.reshape(-1)[i] = (evaluate(plus.reshape(point.shape)) - evaluate(minus.reshape(point.shape))) / (2 * eps)

    if g_ad.size == 0:
        return 0.0
    return float(np.max(np.abs(g_ad - g_fd) / np.maximum(1.0, np.abs(g_ad))))
