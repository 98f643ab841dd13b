"""Reverse-mode automatic differentiation over a recorded tape.

Every primitive applied to a tensor that lives on a tape appends one node
to that tape. ``backward`` walks the tape in reverse and applies each
primitive's vector-Jacobian product. The backward rules are written with
the same primitives, so when ``create_graph=True`` the backward pass is
itself recorded onto the tape and the returned gradients can be
differentiated again. The blocking trainer relies on this to push outer
gradients through unrolled inner-loop optimizer updates.

Module Information:
    - Filename: autodiff.py
    - Module: autodiff
    - Location: src/task_blocking/

Key Concepts:
    - Tensor: float64 numpy array plus an optional (tape, node id) pair
    - Tape: append-only, topologically ordered list of primitive records
    - Tape-of-tape: recorded backward pass for gradients of gradients
    - Broadcasting restricted to equal shapes, scalars, and a leading batch axis

Example:
    with Tape() as tape:
        x = tape.variable(3.0)
        y = x * x * x
        (dy,) = backward(y, [x], create_graph=True)
        (d2y,) = backward(dy, [x])
    # dy.data == 27.0, d2y.data == 18.0
"""

from __future__ import annotations

from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any

import numpy as np

#####################################
# Errors
#####################################


class ShapeError(ValueError):
    """Raised when input shapes are invalid for a primitive."""


class TapeError(ValueError):
    """Raised for tape misuse: non-scalar losses, foreign tensors, mixed tapes."""


#####################################
# Primitive kinds and tape records
#####################################


class Op(StrEnum):
    LEAF = "leaf"
    MATMUL = "matmul"
    TRANSPOSE = "transpose"
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    NEG = "neg"
    SCALE = "scale"
    TANH = "tanh"
    RELU = "relu"
    EXP = "exp"
    LOG = "log"
    SQRT = "sqrt"
    LOG_SOFTMAX = "log_softmax"
    GATHER = "gather"
    SCATTER = "scatter"
    MEAN = "mean"
    SUM = "sum"
    EXPAND = "expand"
    CLAMP = "clamp"


@dataclass(frozen=True, slots=True)
class Node:
    """One recorded primitive application."""

    op: Op
    input_ids: tuple[int | None, ...]
    output_id: int
    inputs: tuple[Tensor, ...] = field(repr=False)
    attrs: dict[str, Any] = field(default_factory=dict, repr=False)


class Tensor:
    """A float64 array, optionally registered as a node on a tape."""

    __slots__ = ("data", "node", "tape")

    def __init__(
        self, data: Any, *, tape: Tape | None = None, node: int | None = None
    ) -> None:
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    # ---------- views ----------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def __repr__(self) -> str:
        where = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    # ---------- operators ----------

    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, _lift(other))

    def __radd__(self, other: float) -> Tensor:
        return add(_lift(other), self)

    def __sub__(self, other: Tensor | float) -> Tensor:
        return sub(self, _lift(other))

    def __rsub__(self, other: float) -> Tensor:
        return sub(_lift(other), self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: float) -> Tensor:
        return scale(self, float(other))

    def __truediv__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _lift(value: Tensor | float) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """Append-only record of primitive applications.

    A tape is single-threaded. Independent tapes share nothing and may run
    in parallel.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.outputs: list[Tensor] = []
        self._recording = True

    def __enter__(self) -> Tape:
        return self

    def __exit__(self, *exc: object) -> None:
        return None

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def recording(self) -> bool:
        return self._recording

    def variable(self, value: Any) -> Tensor:
        """Register a leaf tensor that gradients can be taken with respect to."""
        out = Tensor(np.array(value, dtype=np.float64), tape=self)
        out.node = len(self.nodes)
        self.nodes.append(Node(Op.LEAF, (), out.node, ()))
        self.outputs.append(out)
        return out

    @contextmanager
    def paused(self) -> Iterator[None]:
        """Evaluate without recording; results are plain constants."""
        previous = self._recording
        self._recording = False
        try:
            yield
        finally:
            self._recording = previous

    def _append(self, op: Op, inputs: tuple[Tensor, ...], value: np.ndarray, attrs: dict) -> Tensor:
        out = Tensor(value, tape=self, node=len(self.nodes))
        self.nodes.append(
            Node(op, tuple(t.node for t in inputs), out.node, inputs, attrs)  # type: ignore[arg-type]
        )
        self.outputs.append(out)
        return out


#####################################
# Shape rules
#####################################


def _broadcast_shape(op: Op, a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Equal shapes, a scalar operand, or one shape a trailing suffix of the other."""
    if a == b or b == ():
        return a
    if a == ():
        return b
    if len(a) > len(b) and a[len(a) - len(b) :] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a) :] == a:
        return b
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _reduce_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    if shape == ():
        return reduce_sum(g)
    for _ in range(g.ndim - len(shape)):
        g = reduce_sum(g, axis=0)
    return g


def _check_axis(op: Op, shape: tuple[int, ...], axis: int | None) -> None:
    if axis is not None and not -len(shape) <= axis < len(shape):
        raise ShapeError(f"{op}: axis {axis} out of range for shape {shape}")


#####################################
# Forward rules
#####################################


def _fwd_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"{Op.MATMUL}: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _fwd_transpose(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2:
        raise ShapeError(f"{Op.TRANSPOSE}: expected a matrix, got shape {a.shape}")
    return a.T.copy()


def _fwd_log_softmax(a: np.ndarray) -> np.ndarray:
    if a.ndim < 1:
        raise ShapeError(f"{Op.LOG_SOFTMAX}: needs at least one axis, got shape {a.shape}")
    shifted = a - a.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _fwd_gather(a: np.ndarray, *, indices: np.ndarray) -> np.ndarray:
    if a.ndim < 1 or indices.shape != a.shape[:-1]:
        raise ShapeError(f"{Op.GATHER}: indices shape {indices.shape} does not fit {a.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[-1]):
        raise ShapeError(f"{Op.GATHER}: index out of range for last axis of {a.shape}")
    return np.take_along_axis(a, indices[..., None], axis=-1)[..., 0]


def _fwd_scatter(a: np.ndarray, *, indices: np.ndarray, size: int) -> np.ndarray:
    if indices.shape != a.shape:
        raise ShapeError(f"{Op.SCATTER}: indices shape {indices.shape} does not fit {a.shape}")
    out = np.zeros((*a.shape, size))
    np.put_along_axis(out, indices[..., None], a[..., None], axis=-1)
    return out


def _fwd_expand(a: np.ndarray, *, shape: tuple[int, ...], axis: int | None) -> np.ndarray:
    if axis is None:
        if a.shape != ():
            raise ShapeError(f"{Op.EXPAND}: full expansion needs a scalar, got {a.shape}")
        return np.broadcast_to(a, shape)
    if a.ndim == len(shape) - 1:
        a = np.expand_dims(a, axis)
    try:
        return np.broadcast_to(a, shape)
    except ValueError as exc:
        raise ShapeError(f"{Op.EXPAND}: cannot expand {a.shape} to {shape}") from exc


_FORWARD: dict[Op, Callable[..., np.ndarray]] = {
    Op.MATMUL: _fwd_matmul,
    Op.TRANSPOSE: _fwd_transpose,
    Op.ADD: np.add,
    Op.SUB: np.subtract,
    Op.MUL: np.multiply,
    Op.DIV: np.divide,
    Op.NEG: np.negative,
    Op.SCALE: lambda a, *, factor: a * factor,
    Op.TANH: np.tanh,
    Op.RELU: lambda a: np.maximum(a, 0.0),
    Op.EXP: np.exp,
    Op.LOG: np.log,
    Op.SQRT: np.sqrt,
    Op.LOG_SOFTMAX: _fwd_log_softmax,
    Op.GATHER: _fwd_gather,
    Op.SCATTER: _fwd_scatter,
    Op.MEAN: lambda a, *, axis: np.mean(a, axis=axis),
    Op.SUM: lambda a, *, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims),
    Op.EXPAND: _fwd_expand,
    Op.CLAMP: lambda a, *, low, high: np.clip(a, low, high),
}

_BINARY_ELEMENTWISE = {Op.ADD, Op.SUB, Op.MUL, Op.DIV}


def record(op: Op, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    """Apply a primitive and register the result on the inputs' tape.

    The output is a constant when no input is on a recording tape.
    """
    inputs = tuple(inputs)
    if op in _BINARY_ELEMENTWISE:
        _broadcast_shape(op, inputs[0].shape, inputs[1].shape)
    if op in (Op.MEAN, Op.SUM):
        _check_axis(op, inputs[0].shape, attrs.get("axis"))
    value = _FORWARD[op](*(t.data for t in inputs), **attrs)

    tape: Tape | None = None
    for t in inputs:
        if t.node is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise TapeError(f"{op}: inputs belong to different tapes")
    if tape is None or not tape.recording:
        return Tensor(value)
    return tape._append(op, inputs, value, attrs)


#####################################
# Public primitive wrappers
#####################################


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return record(Op.MATMUL, (a, b))


def transpose(a: Tensor) -> Tensor:
    return record(Op.TRANSPOSE, (a,))


def add(a: Tensor, b: Tensor) -> Tensor:
    return record(Op.ADD, (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return record(Op.SUB, (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return record(Op.MUL, (a, b))


def div(a: Tensor, b: Tensor) -> Tensor:
    return record(Op.DIV, (a, b))


def neg(a: Tensor) -> Tensor:
    return record(Op.NEG, (a,))


def scale(a: Tensor, factor: float) -> Tensor:
    return record(Op.SCALE, (a,), factor=float(factor))


def tanh(a: Tensor) -> Tensor:
    return record(Op.TANH, (a,))


def relu(a: Tensor) -> Tensor:
    return record(Op.RELU, (a,))


def exp(a: Tensor) -> Tensor:
    return record(Op.EXP, (a,))


def log(a: Tensor) -> Tensor:
    return record(Op.LOG, (a,))


def sqrt(a: Tensor) -> Tensor:
    return record(Op.SQRT, (a,))


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    return record(Op.LOG_SOFTMAX, (a,))


def gather(a: Tensor, indices: Any) -> Tensor:
    """Pick one entry per row along the last axis."""
    return record(Op.GATHER, (a,), indices=np.asarray(indices, dtype=np.int64))


def scatter(a: Tensor, indices: Any, size: int) -> Tensor:
    return record(Op.SCATTER, (a,), indices=np.asarray(indices, dtype=np.int64), size=int(size))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    return record(Op.MEAN, (a,), axis=axis)


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return record(Op.SUM, (a,), axis=axis, keepdims=keepdims)


def expand(a: Tensor, shape: tuple[int, ...], axis: int | None = None) -> Tensor:
    """Broadcast ``a`` to ``shape``, re-inserting ``axis`` if it was reduced away."""
    return record(Op.EXPAND, (a,), shape=tuple(shape), axis=axis)


def clamp(a: Tensor, low: float, high: float) -> Tensor:
    return record(Op.CLAMP, (a,), low=float(low), high=float(high))


#####################################
# Backward rules (written with primitives so they can be re-recorded)
#####################################

Grads = tuple[Tensor | None, ...]


def _vjp_matmul(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    a, b = ins
    return matmul(g, transpose(b)), matmul(transpose(a), g)


def _vjp_transpose(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    return (transpose(g),)


def _vjp_add(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    return _reduce_to(g, ins[0].shape), _reduce_to(g, ins[1].shape)


def _vjp_sub(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    return _reduce_to(g, ins[0].shape), _reduce_to(neg(g), ins[1].shape)


def _vjp_mul(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    a, b = ins
    return _reduce_to(mul(g, b), a.shape), _reduce_to(mul(g, a), b.shape)


def _vjp_div(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    a, b = ins
    return _reduce_to(div(g, b), a.shape), _reduce_to(neg(div(mul(g, out), b)), b.shape)


def _vjp_neg(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    return (neg(g),)


def _vjp_scale(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    return (scale(g, attrs["factor"]),)


def _vjp_tanh(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    return (mul(g, sub(Tensor(1.0), mul(out, out))),)


def _vjp_relu(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    return (mul(g, Tensor(ins[0].data > 0.0)),)


def _vjp_exp(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    return (mul(g, out),)


def _vjp_log(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    return (div(g, ins[0]),)


def _vjp_sqrt(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    # gradient at 0 is taken as 0
    positive = out.data > 0.0
    denom = scale(add(out, Tensor(~positive * 1.0)), 2.0)
    return (mul(div(g, denom), Tensor(positive * 1.0)),)


def _vjp_log_softmax(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    total = expand(reduce_sum(g, axis=-1, keepdims=True), out.shape, axis=-1)
    return (sub(g, mul(exp(out), total)),)


def _vjp_gather(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    return (scatter(g, attrs["indices"], ins[0].shape[-1]),)


def _vjp_scatter(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    return (gather(g, attrs["indices"]),)


def _vjp_mean(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    shape = ins[0].shape
    axis = attrs["axis"]
    count = int(np.prod(shape)) if axis is None else shape[axis]
    return (scale(expand(g, shape, axis=axis), 1.0 / count),)


def _vjp_sum(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    return (expand(g, ins[0].shape, axis=attrs["axis"]),)


def _vjp_expand(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    axis = attrs["axis"]
    if axis is None:
        return (reduce_sum(g),)
    keepdims = ins[0].ndim == len(attrs["shape"])
    return (reduce_sum(g, axis=axis, keepdims=keepdims),)


def _vjp_clamp(g: Tensor, ins: tuple[Tensor, ...], out: Tensor, attrs: dict) -> Grads:
    # zero gradient on and beyond the boundary
    a = ins[0].data
    interior = (a > attrs["low"]) & (a < attrs["high"])
    return (mul(g, Tensor(interior * 1.0)),)


_BACKWARD: dict[Op, Callable[[Tensor, tuple[Tensor, ...], Tensor, dict], Grads]] = {
    Op.MATMUL: _vjp_matmul,
    Op.TRANSPOSE: _vjp_transpose,
    Op.ADD: _vjp_add,
    Op.SUB: _vjp_sub,
    Op.MUL: _vjp_mul,
    Op.DIV: _vjp_div,
    Op.NEG: _vjp_neg,
    Op.SCALE: _vjp_scale,
    Op.TANH: _vjp_tanh,
    Op.RELU: _vjp_relu,
    Op.EXP: _vjp_exp,
    Op.LOG: _vjp_log,
    Op.SQRT: _vjp_sqrt,
    Op.LOG_SOFTMAX: _vjp_log_softmax,
    Op.GATHER: _vjp_gather,
    Op.SCATTER: _vjp_scatter,
    Op.MEAN: _vjp_mean,
    Op.SUM: _vjp_sum,
    Op.EXPAND: _vjp_expand,
    Op.CLAMP: _vjp_clamp,
}


#####################################
# Backward pass
#####################################


def backward(
    loss: Tensor, wrt: Sequence[Tensor], *, create_graph: bool = False
) -> list[Tensor]:
    """Return d(loss)/d(t) for every t in ``wrt``.

    Args:
        loss: Scalar tensor recorded on a tape.
        wrt: Tensors on the same tape.
        create_graph: Record the backward pass so the returned gradients
            are themselves differentiable tape nodes.

    Returns:
        Gradients in ``wrt`` order, shaped like their targets. Targets the
        loss does not depend on get zeros.
    """
    tape = loss.tape
    if tape is None or loss.node is None:
        raise TapeError("loss is not recorded on a tape")
    if loss.shape != ():
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    for t in wrt:
        if t.tape is not tape or t.node is None:
            raise TapeError(f"{t!r} is not on the loss's tape")

    end = loss.node
    targets = {t.node for t in wrt}
    # only walk nodes that depend on some target
    relevant: list[bool] = []
    for i in range(end + 1):
        node = tape.nodes[i]
        relevant.append(
            i in targets or any(j is not None and relevant[j] for j in node.input_ids)
        )

    found: dict[int, Tensor] = {}
    pending: dict[int, Tensor] = {end: Tensor(1.0)}
    context = nullcontext() if create_graph else tape.paused()
    with context:
        for i in range(end, -1, -1):
            g = pending.pop(i, None)
            if g is None:
                continue
            if i in targets:
                found[i] = g
            node = tape.nodes[i]
            if node.op is Op.LEAF:
                continue
            in_grads = _BACKWARD[node.op](g, node.inputs, tape.outputs[i], node.attrs)
            for j, gj in zip(node.input_ids, in_grads, strict=True):
                if j is None or gj is None or not relevant[j]:
                    continue
                pending[j] = gj if j not in pending else add(pending[j], gj)

    return [found.get(t.node, Tensor(np.zeros(t.shape))) for t in wrt]  # type: ignore[arg-type]


__all__ = [
    "Node",
    "Op",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "add",
    "backward",
    "clamp",
    "div",
    "exp",
    "expand",
    "gather",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "record",
    "reduce_sum",
    "relu",
    "scale",
    "scatter",
    "sqrt",
    "sub",
    "tanh",
    "transpose",
]
