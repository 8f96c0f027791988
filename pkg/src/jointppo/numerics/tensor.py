"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` only when at least
one input requires a gradient.  Outside a tape every op is plain numpy, which
is what rollout collection uses.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


class DimensionError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


class ContractError(ValueError):
    pass


_state = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # numpy defers to our reflected operators instead of broadcasting over objects
    __array_ufunc__ = None

    # Operator sugar; the functions below do the work.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __rtruediv__(self, other):
        return div(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


class Tape:
    """Append-only record of the operations executed while it is active.

    Nodes are stored in execution order, so walking the list backwards is a
    valid reverse topological order.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.parameter_ids: set[int] = set()
        self._params: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    @property
    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def _watch(self, leaf: Tensor) -> None:
        key = id(leaf)
        if key not in self._params:
            leaf.node_id = len(self.nodes)
            self.nodes.append(leaf)
            self.parameter_ids.add(leaf.node_id)
            self._params[key] = leaf

    def _record(self, out: Tensor, parents: tuple[Tensor, ...]) -> None:
        for p in parents:
            if p.requires_grad and p._backward is None:
                self._watch(p)
        out.node_id = len(self.nodes)
        self.nodes.append(out)

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        """Populate ``.grad`` on every trainable leaf reachable from ``loss``.

        Leaves listed in ``params`` that the loss never touched get zero grads.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        for p in params:
            p.grad = np.zeros_like(p.data)
        for leaf in self._params.values():
            leaf.grad = np.zeros_like(leaf.data)
        if not loss.requires_grad:
            return
        for node in self.nodes:
            if node._backward is not None:
                node.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad += g
            if node is not loss:
                node.grad = None


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    tape.backward(loss, params)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    out._parents = parents
    out._backward = backward_fn
    tape._record(out, parents)
    return out


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


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(a.data**exponent, (a,), bw)


def square(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (2.0 * g * a.data,)

    return _result(a.data * a.data, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _result(out, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _result(out, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g * (a.data > 0),)

    return _result(np.maximum(a.data, 0.0), (a,), bw)


def gelu(a) -> Tensor:
    """tanh-approximated GELU (smooth, so finite-difference checks stay clean)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient passes only where the input is inside [lo, hi]."""
    a = as_tensor(a)

    def bw(g):
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return _result(np.clip(a.data, lo, hi), (a,), bw)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _result(np.where(take_a, a.data, b.data), (a, b), bw)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _result(np.where(take_a, a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------- reductions / shape


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), bw)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = np.argsort(axes)

    def bw(g):
        return (g.transpose(inverse),)

    return _result(a.data.transpose(axes), (a,), bw)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.asarray(a.data[index]), (a,), bw)


def take(a, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis`` with a per-batch index array (``np.take_along_axis``)."""
    a = as_tensor(a)
    indices = np.asarray(indices)

    def bw(g):
        out = np.zeros_like(a.data)
        idx = list(np.indices(indices.shape, sparse=True))
        idx[axis] = indices
        np.add.at(out, tuple(idx), g)
        return (out,)

    return _result(np.take_along_axis(a.data, indices, axis), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            # shared weight matrix: fold the batch axes into rows
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------- normalisation


def _check_mask(mask: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not np.broadcast_to(mask, shape).any(axis=-1).all():
        raise InvalidMaskError("every row needs at least one unmasked entry")
    return mask


def softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.  ``mask`` marks live entries (True = keep).

    Masked entries come out as exactly 0 and receive exactly 0 gradient.
    """
    x = as_tensor(x)
    if mask is None:
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        mask = _check_mask(mask, x.shape)
        z = np.where(mask, x.data, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), bw)


def log_softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Log-softmax over the last axis.  Masked entries are filled with 0."""
    x = as_tensor(x)
    if mask is None:
        z = x.data - x.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = z - lse
        p = np.exp(out)

        def bw(g):
            return (g - p * g.sum(axis=-1, keepdims=True),)

        return _result(out, (x,), bw)

    mask = _check_mask(mask, x.shape)
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = np.where(mask, z - lse, 0.0)
    p = np.where(mask, np.exp(out), 0.0)

    def bw_masked(g):
        g = np.where(mask, g, 0.0)
        return (np.where(mask, g - p * g.sum(axis=-1, keepdims=True), 0.0),)

    return _result(out, (x,), bw_masked)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply gain and bias.

    The variance is floored at ``eps`` (``max(var, eps)``), so constant rows map
    to zeros and already-normalised rows pass through unchanged.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.shape[-1] < 1:
        raise DimensionError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    floored = var < eps
    inv = 1.0 / np.sqrt(np.maximum(var, eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        centered = dxhat - dxhat.mean(axis=-1, keepdims=True)
        proj = xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * np.where(floored, centered, centered - proj)
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _result(out, (x, gain, bias), bw)
