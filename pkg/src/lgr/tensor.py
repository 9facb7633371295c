"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op is a plain function taking and returning :class:`Tensor`. When grad
recording is enabled and any input requires a gradient, the op appends a
record (output, inputs, backward closure) to the active :class:`Tape`.
``backward(loss)`` replays that tape in strict reverse order and then
releases it; calling it again on the same recording raises
:class:`ContractError`.

Broadcasting follows numpy's trailing-axis alignment and nothing else: no
op reshapes implicitly.
"""

from __future__ import annotations

import contextlib
import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float64

_grad_enabled = True
_relu_monitor: list | None = None


class Tensor:
    """Immutable n-d array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)  # always copies
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=DTYPE)
        if arr.flags.writeable and arr.base is None:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> "GradMap":
        return backward(self)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.array(x, dtype=DTYPE))


def zeros(*shape: int) -> Tensor:
    return Tensor._wrap(np.zeros(shape))


def ones(*shape: int) -> Tensor:
    return Tensor._wrap(np.ones(shape))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor._wrap(np.zeros(t.shape))


def eye(n: int) -> Tensor:
    return Tensor._wrap(np.eye(n))


# ----------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class _Node:
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: "Tape"
    generation: int
    index: int
    op: str


class GradMap(dict):
    """Mapping ``Tensor -> ndarray`` keyed by tensor identity."""

    def of(self, t: Tensor) -> np.ndarray:
        return self[t]


@dataclass(eq=False)
class Tape:
    """Ordered record of executed differentiable ops.

    Single-owner; use as a context manager to make it the recording target.
    """

    records: list[tuple[Tensor, _Node]] = field(default_factory=list)
    generation: int = 0

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records = []
        self.generation += 1

    def ops(self) -> list[str]:
        return [node.op for _, node in self.records]

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> GradMap:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        node = loss._node
        if node is None:
            raise ValueError("loss is not connected to any tape (no recorded ops)")
        if node.tape is not self:
            raise ContractError("loss was recorded on a different tape")
        if node.generation != self.generation:
            raise ContractError("tape already consumed by a previous backward; rerun the forward pass")

        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        leaves: dict[int, Tensor] = {}
        for out, rec in reversed(self.records[: node.index + 1]):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    leaves[id(inp)] = inp
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = GradMap()
        for key, leaf in leaves.items():
            result[leaf] = grads[key]
        if wrt is not None:
            for t in wrt:
                if t not in result:
                    result[t] = np.zeros(t.shape)
        self.reset()
        return result


_tape_stack: list[Tape] = [Tape()]


def current_tape() -> Tape:
    return _tape_stack[-1]


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> GradMap:
    """Gradients of scalar ``loss`` w.r.t. every requires_grad leaf on its tape."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise ValueError("loss is not connected to any tape (no recorded ops)")
    return loss._node.tape.backward(loss, wrt)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _make(out: np.ndarray, inputs: tuple[Tensor, ...], bwd, op: str) -> Tensor:
    t = Tensor._wrap(out)
    if _grad_enabled and any(i.requires_grad for i in inputs):
        tape = current_tape()
        t.requires_grad = True
        t._node = _Node(inputs, bwd, tape, tape.generation, len(tape.records), op)
        tape.records.append((t, t._node))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bwd, "mul")


def elementwise(a, b, op: str) -> Tensor:
    """``op`` is ``"add"`` or ``"mul"``."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def power(x: Tensor, p: float) -> Tensor:
    """Elementwise ``x**p`` for a constant exponent (inputs must keep it real)."""
    x = as_tensor(x)
    out = np.power(x.data, p)

    def bwd(g):
        return (g * p * np.power(x.data, p - 1),)

    return _make(out, (x,), bwd, "power")


# ----------------------------------------------------------------------------
# activations


class ActivationKind(enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if _relu_monitor is not None:
        _relu_monitor.append(x.data)
    pos = x.data > 0  # derivative at exactly 0 is 0

    def bwd(g):
        return (g * pos,)

    return _make(np.where(pos, x.data, 0.0), (x,), bwd, "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _make(y, (x,), bwd, "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bwd, "softmax")


def activation(x: Tensor, kind: ActivationKind | str, axis: int = -1) -> Tensor:
    kind = ActivationKind(kind)
    if kind is ActivationKind.RELU:
        return relu(x)
    if kind is ActivationKind.SIGMOID:
        return sigmoid(x)
    return softmax(x, axis)


# ----------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            if a.ndim == 2 and b.ndim > 2 and g.ndim == b.ndim:
                # fold the batch into one GEMM: sum_B g_B b_B^T
                gt = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
                bt = np.moveaxis(b.data, -2, 0).reshape(b.shape[-2], -1)
                ga = gt @ bt.T
            elif b.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2 and g.ndim == a.ndim:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    if b.ndim == 2 and a.ndim > 2:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out = a.data @ b.data
    return _make(out, (a, b), bwd, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or apply a full permutation ``axes``."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose needs rank >= 2, got {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(x.data, axes), (x,), bwd, "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None

    def bwd(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), bwd, "reshape")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from None

    def bwd(g):
        return (_unbroadcast(g, x.shape),)

    return _make(np.ascontiguousarray(out), (x,), bwd, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ref = ts[0]
    ax = axis % ref.ndim
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat: shapes {[u.shape for u in ts]} differ off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bwd, "concat")


def concat_last_axis(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=-1)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (x,), bwd, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis, keepdims), 1.0 / n)


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bwd(g):
        gd = g * (2.0 / n) * diff
        return (gd if pred.requires_grad else None, -gd if target.requires_grad else None)

    return _make(np.asarray((diff * diff).mean()), (pred, target), bwd, "mse")


# ----------------------------------------------------------------------------
# spatial ops, NHWC layout


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation. ``x``: B×H×W×Cin, ``w``: kh×kw×Cin×Cout, ``b``: Cout."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    B, H, W, cin = x.shape
    kh, kw, _, cout = w.shape
    s, p = stride, padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(B, Ho, Wo, cout)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs = (x, w, b)

    def bwd(g):
        g2 = g.reshape(B * Ho * Wo, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gc = (g2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, cin)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + s * Ho : s, j : j + s * Wo : s, :] += gc[:, :, :, i, j, :]
            gx = gxp[:, p : p + H, p : p + W, :] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, inputs, bwd, "conv2d")


def avg_pool2(x: Tensor) -> Tensor:
    """2×2 average pooling with stride 2 on B×H×W×C (H, W even)."""
    x = as_tensor(x)
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"avg_pool2 needs even spatial extents, got {x.shape}")
    out = x.data.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def bwd(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return _make(out, (x,), bwd, "avg_pool2")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour ×2 upsampling on B×H×W×C."""
    x = as_tensor(x)
    B, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bwd(g):
        return (g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)),)

    return _make(out, (x,), bwd, "upsample2")
