"""Dense n-d tensors with a reverse-mode gradient tape, backed by numpy.

Broadcasting follows numpy: shapes are aligned at their trailing dimension,
and a dimension of size 1 (or a missing leading dimension) stretches to
match the other operand. Gradients flowing back through a broadcast are
summed over the stretched dimensions.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float32
# test hook: op name -> factor applied to that op's input gradients
_CORRUPTED: dict[str, float] = {}


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def corrupt_gradient(op: str, factor: float = 1.5):
    """Scale the gradients produced by ``op`` (used to prove gradcheck bites)."""
    _CORRUPTED[op] = factor
    try:
        yield
    finally:
        _CORRUPTED.pop(op, None)


def _to_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype.kind != "f":
        arr = arr.astype(_DEFAULT_DTYPE)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _to_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            pgrads = node._backward(g)
            factor = _CORRUPTED.get(node.op)
            for parent, pg in zip(node._parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                if factor is not None:
                    pg = pg * factor
                if pg.shape != parent.data.shape:
                    raise ShapeError(
                        f"{node.op}: gradient shape {pg.shape} does not match input shape {parent.data.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return sqrt(self)

    def exp(self):
        return exp(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _binary(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# -- elementwise binary ----------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    _check_broadcast("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = _binary(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), backward, "matmul")


# -- elementwise unary -----------------------------------------------------
def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _record(out, (x,), lambda g: (g * (out > 0),), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,), "exp")


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _record(y, (x,), lambda g: (g / (2 * y),), "sqrt")


# -- reductions ------------------------------------------------------------
def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    # float64 accumulation, stored back in the input precision
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims), dtype=x.dtype),)

    return _record(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = np.mean(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims), dtype=x.dtype) / n,)

    return _record(np.asarray(out), (x,), backward, "mean")


def max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry."""
    if axis is None:
        flat = int(np.argmax(x.data))
        out = x.data.reshape(-1)[flat]
        out = out.reshape((1,) * x.ndim) if keepdims else np.asarray(out)

        def backward(g):
            gx = np.zeros_like(x.data)
            gx.reshape(-1)[flat] = g.reshape(-1)[0]
            return (gx,)

        return _record(out, (x,), backward, "max")

    axis = axis % x.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, idx, gk, axis=axis)
        return (gx,)

    return _record(out, (x,), backward, "max")


# -- normalisation / attention helpers --------------------------------------
def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax.

    ``mask`` (broadcastable bool array, True = keep) removes entries before
    normalisation; masked outputs are exactly zero, and a row with no
    surviving entries is all zeros.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0)
    e = np.exp(z - zmax)
    if mask is not None:
        e = np.where(mask, e, 0)
    s = np.sum(e, axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)
    y = (e / np.where(s > 0, s, 1)).astype(x.dtype)

    def backward(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _record(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    xd = x.data
    mu = np.mean(xd, axis=-1, keepdims=True, dtype=np.float64)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(xd.dtype)
    inv = inv.astype(xd.dtype)
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    parents = [x] + [t for t in (weight, bias) if t is not None]

    def backward(g):
        gxhat = g * weight.data if weight is not None else g
        m1 = np.mean(gxhat, axis=-1, keepdims=True)
        m2 = np.mean(gxhat * xhat, axis=-1, keepdims=True)
        grads = [inv * (gxhat - m1 - xhat * m2)]
        lead = tuple(range(g.ndim - 1))
        if weight is not None:
            grads.append(np.sum(g * xhat, axis=lead))
        if bias is not None:
            grads.append(np.sum(g, axis=lead))
        return tuple(grads)

    return _record(out.astype(xd.dtype), parents, backward, "layer_norm")


# -- structural ------------------------------------------------------------
def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    """Slicing and integer-array gathering."""
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _record(np.array(out, dtype=x.dtype), (x,), backward, "slice")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; with ``axes=None`` swap the last two."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 dims, got {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {shape}") from None
    return _record(np.array(out), (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    """Record an externally defined op.

    ``backward(g)`` must return one gradient (or None) per parent, each with
    that parent's shape.
    """
    return _record(np.asarray(data), parents, backward, name)
