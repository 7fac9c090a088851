"""
Dense float64 tensors with a dynamic reverse-mode tape.

Operations record themselves on the tape that is active in the current context
(see `Tape`); outside a tape they run as plain value computations. `backward`
walks the tape in reverse and leaves d(loss)/d(leaf) in `Tensor.grad`.
"""

import contextvars
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from types import TracebackType
from typing import Any, Optional, Self, Type

import numpy as np

from .exceptions import ContractError, DegenerateRowError, DimensionError, NondeterministicError, TokenIndexError

logger = logging.getLogger(__name__)

MASK_FILL = -1e9
_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715

Grads = Sequence[Optional[np.ndarray]]
BackwardFn = Callable[[np.ndarray], Grads]


class Tensor:
    def __init__(self, data: Any, requires_grad: bool = False) -> None:
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("active_tape", default=None)


class Tape:
    """Ordered record of executed operations; entries are appended in execution order"""

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self._tokens: list[contextvars.Token[Optional[Tape]]] = []

    def __enter__(self) -> Self:
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(
        self,
        exc_type: Optional[Type[BaseException]] = None,
        exc_value: Optional[BaseException] = None,
        traceback: Optional[TracebackType] = None,
    ) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def clear(self) -> None:
        self.entries.clear()


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def record_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap a forward result and, when a tape is active and gradients are needed, record its backward rule"""
    if not np.all(np.isfinite(data)):
        raise ContractError(f"{op} produced non-finite values")

    requires_grad = any(inp.requires_grad for inp in inputs)
    out = Tensor(data, requires_grad=requires_grad)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and requires_grad:
        tape.record(TapeEntry(op, tuple(inputs), out, backward))

    return out


def _check_2d(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.ndim != 2:
            raise DimensionError(f"{op}: expected a 2-D tensor, got shape {t.shape}")


def _check_broadcast(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> None:
    if a == b:
        return
    if len(a) == 2 and b in ((a[1],), (1, a[1]), (a[0], 1)):
        return
    raise DimensionError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 1:
        return grad.sum(axis=0)
    if shape[0] == 1 and grad.shape[0] != 1:
        return grad.sum(axis=0, keepdims=True)
    return grad.sum(axis=1, keepdims=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")

    def backward(grad: np.ndarray) -> Grads:
        return grad @ b.data.T, a.data.T @ grad

    return record_op("matmul", a.data @ b.data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a.shape, b.shape)

    def backward(grad: np.ndarray) -> Grads:
        return grad, _unbroadcast(grad, b.shape)

    return record_op("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a.shape, b.shape)

    def backward(grad: np.ndarray) -> Grads:
        return grad, -_unbroadcast(grad, b.shape)

    return record_op("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; `b` may be row-broadcast (n×1) or a feature vector (d)"""
    _check_broadcast("mul", a.shape, b.shape)

    def backward(grad: np.ndarray) -> Grads:
        return grad * b.data, _unbroadcast(grad * a.data, b.shape)

    return record_op("mul", a.data * b.data, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(grad: np.ndarray) -> Grads:
        return (grad * factor,)

    return record_op("scale", a.data * factor, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(grad: np.ndarray) -> Grads:
        return (grad * (1.0 - out**2),)

    return record_op("tanh", out, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of the Gaussian error linear unit"""
    x = a.data
    inner = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    out = 0.5 * x * (1.0 + inner)

    def backward(grad: np.ndarray) -> Grads:
        d_inner = (1.0 - inner**2) * _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        return (grad * (0.5 * (1.0 + inner) + 0.5 * x * d_inner),)

    return record_op("gelu", out, (a,), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; without a generator (evaluation mode) or with p == 0 it is the identity"""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    if rng is None or p == 0.0:
        return a

    keep = (rng.random(a.shape) >= p).astype(np.float64) / (1.0 - p)

    def backward(grad: np.ndarray) -> Grads:
        return (grad * keep,)

    return record_op("dropout", a.data * keep, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    _check_2d("concat", *tensors)
    other = 1 - axis
    if len({t.shape[other] for t in tensors}) != 1:
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}")

    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(grad: np.ndarray) -> Grads:
        return np.split(grad, bounds, axis=axis)

    return record_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def transpose(a: Tensor) -> Tensor:
    _check_2d("transpose", a)

    def backward(grad: np.ndarray) -> Grads:
        return (grad.T,)

    return record_op("transpose", np.ascontiguousarray(a.data.T), (a,), backward)


def mean(a: Tensor) -> Tensor:
    size = a.data.size

    def backward(grad: np.ndarray) -> Grads:
        return (np.full(a.shape, float(grad) / size),)

    return record_op("mean", np.asarray(a.data.mean()), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(grad: np.ndarray) -> Grads:
        return (np.full(a.shape, float(grad)),)

    return record_op("sum", np.asarray(a.data.sum()), (a,), backward)


def softmax_rows(x: Tensor, mask: Tensor | np.ndarray | None = None) -> Tensor:
    """
    Row-wise softmax. Masked entries (mask == 0) get MASK_FILL added before normalisation
    and are set to exactly zero afterwards.
    """
    _check_2d("softmax_rows", x)
    keep = np.ones(x.shape, dtype=bool)
    if mask is not None:
        mask_data = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
        if mask_data.shape != x.shape:
            raise DimensionError(f"softmax_rows: mask shape {mask_data.shape} does not match {x.shape}")
        keep = mask_data > 0

    empty = ~keep.any(axis=1)
    if empty.any():
        raise DegenerateRowError(f"softmax_rows: rows {np.flatnonzero(empty).tolist()} are fully masked")

    shifted = np.where(keep, x.data, x.data + MASK_FILL)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    out = np.where(keep, exp / exp.sum(axis=1, keepdims=True), 0.0)

    def backward(grad: np.ndarray) -> Grads:
        return (out * (grad - (grad * out).sum(axis=1, keepdims=True)),)

    return record_op("softmax_rows", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    _check_2d("layer_norm", x)
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match features {d}")

    centered = x.data - x.data.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=1, keepdims=True) + eps)
    normed = centered * inv_std

    def backward(grad: np.ndarray) -> Grads:
        d_normed = grad * gamma.data
        d_x = inv_std * (
            d_normed
            - d_normed.mean(axis=1, keepdims=True)
            - normed * (d_normed * normed).mean(axis=1, keepdims=True)
        )
        return d_x, (grad * normed).sum(axis=0), grad.sum(axis=0)

    return record_op("layer_norm", normed * gamma.data + beta.data, (x, gamma, beta), backward)


def embedding_gather(table: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
    """Row i of the result is table[ids[i]]; the backward pass scatter-adds into the table"""
    _check_2d("embedding_gather", table)
    index = np.asarray(ids, dtype=np.int64).reshape(-1)
    bad = (index < 0) | (index >= table.shape[0])
    if bad.any():
        raise TokenIndexError(f"id {int(index[bad][0])} out of range for a table of {table.shape[0]} rows")

    def backward(grad: np.ndarray) -> Grads:
        table_grad = np.zeros(table.shape)
        np.add.at(table_grad, index, grad)
        return (table_grad,)

    return record_op("embedding_gather", table.data[index], (table,), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    return embedding_gather(x, np.arange(start, stop))


def gather_elements(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """out[...] = x[rows[...], cols[...]] for integer index arrays of equal shape"""
    _check_2d("gather_elements", x)
    rows, cols = np.broadcast_arrays(np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))

    def backward(grad: np.ndarray) -> Grads:
        x_grad = np.zeros(x.shape)
        np.add.at(x_grad, (rows, cols), grad)
        return (x_grad,)

    return record_op("gather_elements", x.data[rows, cols], (x,), backward)


def backward(loss: Tensor, tape: Tape) -> None:
    """
    Populate `grad` on every leaf tensor requiring gradients that `loss` depends on.

    Gradients accumulate into existing `grad` buffers; the tape is cleared afterwards.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    produced = {id(entry.output) for entry in tape.entries}
    if id(loss) not in produced:
        raise ContractError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        grad = grads.pop(id(entry.output), None)
        if grad is None:
            continue

        for inp, inp_grad in zip(entry.inputs, entry.backward(grad)):
            if inp_grad is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + inp_grad if key in grads else inp_grad
            if key not in produced:
                leaves[key] = inp

    for key, leaf in leaves.items():
        leaf.grad = grads[key].copy() if leaf.grad is None else leaf.grad + grads[key]

    logger.debug(f"backward over {len(tape)} tape entries reached {len(leaves)} leaves")
    tape.clear()


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """
    Largest relative error between analytic gradients and central finite differences.

    Relative error is |analytic - numeric| / max(1, |analytic|). `f` must rebuild its
    graph on every call and be deterministic; dropout-style randomness is rejected.
    """
    if step <= 0:
        raise ContractError(f"finite-difference step must be > 0, got {step}")

    for param in params:
        param.grad = None
    with Tape() as tape:
        loss = f()
    reference = loss.item()
    if f().item() != reference:
        raise NondeterministicError("function under gradient check is not deterministic")
    backward(loss, tape)

    worst = 0.0
    for param in params:
        analytic = param.grad if param.grad is not None else np.zeros(param.shape)
        for index in np.ndindex(*param.shape):
            original = param.data[index]
            param.data[index] = original + step
            plus = f().item()
            param.data[index] = original - step
            minus = f().item()
            param.data[index] = original

            numeric = (plus - minus) / (2.0 * step)
            error = abs(analytic[index] - numeric) / max(1.0, abs(analytic[index]))
            worst = max(worst, error)

    return worst
