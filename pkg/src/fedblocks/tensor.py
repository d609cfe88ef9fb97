# Dense tensors with reverse-mode gradients

# Copyright (C) 2026   fedblocks developers

"""Minimal dense tensor arithmetic with a gradient tape.

Values live in read-only, C-ordered (row-major) ``float64`` numpy arrays.
Every primitive checks shapes explicitly; the only broadcast is the bias
add in :func:`add_bias`. When any operand is bound to a :class:`GradTape`
the primitive records itself together with its vector-Jacobian product, and
:func:`backward` replays the records in reverse order.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import DimensionError, LabelIndexError, TapeError

logger = logging.getLogger(__name__)

ElementwiseKind = Literal["add", "mul", "relu", "tanh"]
VJP = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array, dtype=np.float64)
    if not array.flags.c_contiguous:
        array = array.copy(order="C")
    array.setflags(write=False)
    return array


class Tensor:
    """An immutable float64 array, optionally bound to a gradient tape.

    Tensors compare and hash by identity so they can key gradient maps.
    """

    __slots__ = ("data", "tape")

    def __init__(self, data, tape: "GradTape | None" = None):
        self.data: np.ndarray = _frozen(np.array(data, dtype=np.float64, copy=True))
        self.tape = tape

    @classmethod
    def _wrap(cls, array: np.ndarray, tape: "GradTape | None") -> "Tensor":
        obj = cls.__new__(cls)
        obj.data = _frozen(array)
        obj.tape = tape
        return obj

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def flat(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        bound = "taped" if self.tape is not None else "constant"
        return f"Tensor(shape={self.shape}, {bound})"


@dataclass(frozen=True)
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: VJP


class GradTape:
    """Ordered record of primitive operations for one forward pass.

    A tape is single owner. Use one tape per forward/backward pair and do not
    share it between threads.
    """

    def __init__(self) -> None:
        self._records: list[Record] = []
        self._watched: list[Tensor] = []

    def watch(self, array) -> Tensor:
        """Create a parameter tensor whose gradient :func:`backward` will report."""
        tensor = Tensor(array, tape=self)
        self._watched.append(tensor)
        return tensor

    def record(self, op: str, inputs: Sequence[Tensor], output: np.ndarray, vjp: VJP) -> Tensor:
        out = Tensor._wrap(output, self)
        self._records.append(Record(op=op, inputs=tuple(inputs), output=out, vjp=vjp))
        return out

    @property
    def records(self) -> tuple[Record, ...]:
        return tuple(self._records)

    @property
    def watched(self) -> tuple[Tensor, ...]:
        return tuple(self._watched)

    def __len__(self) -> int:
        return len(self._records)


def _tape_of(*tensors: Tensor) -> GradTape | None:
    tape: GradTape | None = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise TapeError("Operands are bound to different gradient tapes")
    return tape


def _emit(op: str, inputs: Sequence[Tensor], output: np.ndarray, vjp: VJP) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor._wrap(output, None)
    return tape.record(op, inputs, output, vjp)


def _require_2d(name: str, x: Tensor) -> None:
    if x.ndim != 2:
        raise DimensionError(f"{name} expects a 2-D tensor, got shape {x.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an (m, k) and a (k, n) tensor.

    Raises:
        DimensionError: If either operand is not 2-D or the inner dimensions differ.
    """
    _require_2d("matmul", a)
    _require_2d("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def vjp(g: np.ndarray):
        return g @ B.T, A.T @ g

    return _emit("matmul", (a, b), A @ B, vjp)


def elementwise(kind: ElementwiseKind, *operands: Tensor) -> Tensor:
    """Apply ``add``/``mul`` (binary) or ``relu``/``tanh`` (unary) elementwise."""
    if kind in ("add", "mul"):
        if len(operands) != 2:
            raise DimensionError(f"{kind} takes two operands, got {len(operands)}")
        a, b = operands
        if a.shape != b.shape:
            raise DimensionError(f"{kind} operands differ in shape: {a.shape} vs {b.shape}")
        A, B = a.data, b.data
        if kind == "add":
            return _emit("add", (a, b), A + B, lambda g: (g, g))
        return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A))

    if kind in ("relu", "tanh"):
        if len(operands) != 1:
            raise DimensionError(f"{kind} takes one operand, got {len(operands)}")
        (x,) = operands
        X = x.data
        if kind == "relu":
            active = X > 0
            return _emit("relu", (x,), np.where(active, X, 0.0), lambda g: (g * active,))
        Y = np.tanh(X)
        return _emit("tanh", (x,), Y, lambda g: (g * (1.0 - Y * Y),))

    raise ValueError(f"Unknown elementwise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def relu(x: Tensor) -> Tensor:
    return elementwise("relu", x)


def tanh(x: Tensor) -> Tensor:
    return elementwise("tanh", x)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-n bias to every row of a (B, n) tensor."""
    _require_2d("add_bias", x)
    if bias.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise DimensionError(f"bias of shape {bias.shape} does not match rows of shape {x.shape}")
    return _emit("add_bias", (x, bias), x.data + bias.data, lambda g: (g, g.sum(axis=0)))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate (B, n_i) tensors along the feature axis."""
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    for t in tensors:
        _require_2d("concat", t)
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise DimensionError(f"concat operands differ in batch size: {sorted(rows)}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def vjp(g: np.ndarray):
        return tuple(np.split(g, splits, axis=1))

    return _emit("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=1), vjp)


def column(x: Tensor, j: int) -> Tensor:
    """Select column ``j`` of a (B, n) tensor as a (B, 1) tensor."""
    _require_2d("column", x)
    if not 0 <= j < x.shape[1]:
        raise DimensionError(f"column {j} out of range for shape {x.shape}")
    shape = x.shape

    def vjp(g: np.ndarray):
        grad = np.zeros(shape)
        grad[:, j : j + 1] = g
        return (grad,)

    return _emit("column", (x,), x.data[:, j : j + 1], vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reinterpret the row-major values of ``x`` with a new shape of equal size."""
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    original = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(original),))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each row of a (B, d) tensor by the matching entry of a (B, 1) tensor."""
    _require_2d("scale_rows", x)
    if s.shape != (x.shape[0], 1):
        raise DimensionError(f"row scales of shape {s.shape} do not match {x.shape}")
    X, S = x.data, s.data

    def vjp(g: np.ndarray):
        return g * S, (g * X).sum(axis=1, keepdims=True)

    return _emit("scale_rows", (x, s), X * S, vjp)


def _softmax_array(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction.

    Raises:
        DimensionError: If the last axis is empty.
    """
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax of an empty tensor (shape {x.shape})")
    Y = _softmax_array(x.data)

    def vjp(g: np.ndarray):
        return (Y * (g - (g * Y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), Y, vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    Accepts a single (n_classes,) logit vector with an integer label, or a
    (B, n_classes) batch with B labels. The gradient is
    ``(softmax(logits) - one_hot(labels)) / B``.

    Raises:
        DimensionError: On empty logits or a label count that does not match the batch.
        LabelIndexError: If a label is outside ``[0, n_classes)``.
    """
    single = logits.ndim == 1
    Z = logits.data[None, :] if single else logits.data
    if Z.ndim != 2 or Z.shape[1] == 0 or Z.shape[0] == 0:
        raise DimensionError(f"cross_entropy needs non-empty logits, got shape {logits.shape}")
    y = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if y.shape != (Z.shape[0],):
        raise DimensionError(f"{y.size} labels for a batch of {Z.shape[0]}")
    n_classes = Z.shape[1]
    if np.any(y < 0) or np.any(y >= n_classes):
        raise LabelIndexError(f"labels must lie in [0, {n_classes}), got {y[(y < 0) | (y >= n_classes)][:5].tolist()}")

    batch = Z.shape[0]
    rows = np.arange(batch)
    m = Z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(Z - m).sum(axis=1))
    loss = np.array((lse - Z[rows, y]).sum() / batch)
    P = _softmax_array(Z)

    def vjp(g: np.ndarray):
        grad = P.copy()
        grad[rows, y] -= 1.0
        grad *= g / batch
        return (grad[0] if single else grad,)

    return _emit("cross_entropy", (logits,), loss, vjp)


def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    X = x.data
    return _emit("reduce_sum", (x,), np.array(X.sum()), lambda g: (np.full(X.shape, g),))


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every tensor watched by ``tape``.

    Records are visited in exact reverse order of recording. Watched tensors
    the loss does not depend on get an all-zero gradient.

    Raises:
        TapeError: If ``loss`` was not produced on ``tape``.
        DimensionError: If ``loss`` is not a scalar.
    """
    if loss.tape is not tape or not (any(r.output is loss for r in tape.records) or any(w is loss for w in tape.watched)):
        raise TapeError("Loss was not produced by this tape")
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for record in reversed(tape.records):
        g = grads.get(id(record.output))
        if g is None:
            continue
        for tensor, contribution in zip(record.inputs, record.vjp(g)):
            if contribution is None or tensor.tape is None:
                continue
            key = id(tensor)
            grads[key] = contribution if key not in grads else grads[key] + contribution

    logger.debug(f"Backward pass over {len(tape)} records, {len(tape.watched)} watched tensors")
    return {w: np.asarray(grads.get(id(w), np.zeros(w.shape)), dtype=np.float64).reshape(w.shape) for w in tape.watched}
