"""Small define-by-run reverse-mode autodiff on top of numpy.

Every op returns a new :class:`Tensor`. When a :class:`Tape` is active and
at least one input requires a gradient, the op appends a node holding a
closure that maps the output gradient to input gradients. ``Tape.backward``
walks those nodes in exact reverse order.

All data is float64.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "MaskError",
    "add", "sub", "mul", "neg", "scale", "matmul", "linear", "transpose", "dot",
    "tanh", "sigmoid", "relu", "exp", "log", "clip",
    "softmax", "concat", "stack", "mean", "sum", "max",
    "conv1d", "maxpool1d", "embedding", "reshape", "index",
    "finite_difference_oracle",
]


class ShapeError(ValueError):
    pass


class MaskError(ValueError):
    pass


class Tensor:
    """Dense float64 array plus optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


class _Node:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind, inputs, output, backward):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside are recorded::

        with Tape() as tape:
            loss = ...
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: _Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp.is_leaf:
                    leaves[key] = inp
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, leaf in leaves.items():
            leaf.grad += grads[key]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, inputs: Sequence[Tensor], out: np.ndarray,
            backward: Callable[[np.ndarray], Iterable]) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=False)
    tape = _active_tape()
    if needs and tape is not None:
        result.requires_grad = True
        result.is_leaf = False
        tape._append(_Node(kind, tuple(inputs), result, backward))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _record("scale", (a,), a.data * s, lambda g: (g * s,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign to avoid overflow in exp
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    on = a.data > 0
    return _record("relu", (a,), np.where(on, a.data, 0.0), lambda g: (g * on,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _record("exp", (a,), y, lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _record("log", (a,), np.log(x), lambda g: (g / x,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where clamping is active."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``a @ b`` for operands with ndim >= 2 and equal leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2] \
            or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _record("matmul", (a, b), out, backward)


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T (+ b)`` where ``w`` is (out, in) and ``x`` is (..., in).

    With a 1-D ``x`` this is the plain matrix-vector product ``w x``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    out = x.data @ w.data.T
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape}")
        out = out + b.data
        inputs.append(b)
    def backward(g):
        gx = g @ w.data
        g2 = g.reshape(-1, w.shape[0])
        gw = g2.T @ x.data.reshape(-1, w.shape[1])
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record("linear", inputs, out, backward)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeError(f"transpose: needs ndim >= 2, got shape {a.shape}")
    return _record("transpose", (a,), np.swapaxes(a.data, -1, -2),
                   lambda g: (np.swapaxes(g, -1, -2),))


def dot(a, b) -> Tensor:
    """Inner product over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    out = np.einsum("...i,...i->...", a.data, b.data)
    return _record("dot", (a, b), out,
                   lambda g: (g[..., None] * b.data, g[..., None] * a.data))


# ---------------------------------------------------------------- reductions

def softmax(x, mask=None, axis: int = -1) -> Tensor:
    """Max-shifted softmax; masked entries come out exactly 0."""
    x = _as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} does not match {z.shape}")
        if not np.all(mask.any(axis=axis)):
            raise MaskError("softmax: every entry along the axis is masked")
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), y, backward)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", (x,), out, backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _record("mean", (x,), out, backward)


def max(x, axis: int = -1, mask=None) -> Tensor:  # noqa: A001
    """Max over ``axis``; masked-out entries are ignored.

    The gradient goes to the first maximal entry.
    """
    x = _as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not np.all(mask.any(axis=axis)):
            raise MaskError("max: every entry along the axis is masked")
        z = np.where(mask, z, -np.inf)
    arg = np.expand_dims(z.argmax(axis=axis), axis)
    out = np.take_along_axis(z, arg, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _record("max", (x,), out, backward)


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenation (direct sum) along ``axis``."""
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", tensors, out, backward)


def stack(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: incompatible shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record("stack", tensors, out, backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def index(x, key) -> Tensor:
    """Basic numpy indexing; the gradient is scattered back."""
    x = _as_tensor(x)
    out = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _record("index", (x,), np.array(out, copy=True), backward)


def embedding(table, codes) -> Tensor:
    """Select columns of a (d, vocab) table: result shape ``codes.shape + (d,)``.

    Equivalent to multiplying the table by a one-hot code vector.
    """
    table = _as_tensor(table)
    codes = np.asarray(codes, dtype=np.int64)
    vocab = table.shape[1]
    if codes.size and (codes.min() < 0 or codes.max() >= vocab):
        raise IndexError(f"embedding: code index out of range [0, {vocab})")
    out = np.moveaxis(table.data[:, codes], 0, -1)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt.T, codes.reshape(-1), g.reshape(-1, table.shape[0]))
        return (gt,)

    return _record("embedding", (table,), np.ascontiguousarray(out), backward)


# ---------------------------------------------------------------- convolution

def _pad_to(data: np.ndarray, width: int) -> np.ndarray:
    short = width - data.shape[-1]
    if short <= 0:
        return data
    pad = [(0, 0)] * (data.ndim - 1) + [(0, short)]
    return np.pad(data, pad)


def conv1d(x, w, b=None, stride: int = 1) -> Tensor:
    """Valid 1-D cross-correlation.

    ``x`` is (N, C_in, L), ``w`` is (C_out, C_in, k), result (N, C_out, L_out).
    Inputs shorter than ``k`` are right-padded with zeros to length ``k``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {w.shape}")
    k = w.shape[2]
    length = x.shape[2]
    xp = _pad_to(x.data, k)
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride]
    # windows: (N, C_in, L_out, k)
    out = np.einsum("nclk,ock->nol", windows, w.data, optimize=True)
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv1d: bias shape {b.shape} does not match {w.shape}")
        out = out + b.data[None, :, None]
        inputs.append(b)
    l_out = out.shape[2]

    def backward(g):
        gw = np.einsum("nol,nclk->ock", g, windows, optimize=True)
        gwin = np.einsum("nol,ock->nclk", g, w.data, optimize=True)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j:j + stride * (l_out - 1) + 1:stride] += gwin[:, :, :, j]
        gx = gxp[:, :, :length]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _record("conv1d", inputs, out, backward)


def maxpool1d(x, width: int = 2, stride: int = 2) -> Tensor:
    """Max-pooling over the last axis of (N, C, L); short inputs zero-padded."""
    x = _as_tensor(x)
    length = x.shape[-1]
    xp = _pad_to(x.data, width)
    windows = np.lib.stride_tricks.sliding_window_view(xp, width, axis=-1)[..., ::stride, :]
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    n_out = out.shape[-1]

    def backward(g):
        gxp = np.zeros_like(xp)
        span = stride * (n_out - 1) + 1
        for j in range(width):
            gxp[..., j:j + span:stride] += g * (arg == j)
        return (gxp[..., :length],)

    return _record("maxpool1d", (x,), out, backward)


# ---------------------------------------------------------------- oracle

def finite_difference_oracle(f: Callable[[], float], params: Mapping[str, Tensor],
                             epsilon: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``f`` w.r.t. every scalar slot of ``params``.

    ``f`` takes no arguments and reads the parameters by reference; each slot
    is perturbed in place and restored bit-exactly afterwards.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    out = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError(f"parameter {name!r} is not contiguous")
        est = np.zeros(flat.shape)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = f()
            flat[i] = orig - epsilon
            lo = f()
            flat[i] = orig
            est[i] = (hi - lo) / (2.0 * epsilon)
        out[name] = est.reshape(p.shape)
    return out
