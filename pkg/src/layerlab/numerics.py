"""Dense float32 tensors with a small reverse-mode differentiation tape.

Every op returns a new ``Tensor``. When any input requires gradients (and
recording is enabled), the result remembers its parents together with a
closure mapping the upstream gradient to one gradient per parent.
``backward`` walks the graph in reverse topological order.

Ops keep the floating dtype of their inputs: model code runs in float32,
gradient checks run the same code in float64.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class DimensionError(ValueError):
    pass


class DegenerateMaskError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


class RankError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype or DEFAULT_DTYPE)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        # scalar or constant array: keep a's dtype
        c = np.asarray(b, dtype=a.dtype)
        out = a.data * c

        def bw_const(g):
            return (_unbroadcast(g * c, a.shape),)

        return _result(out, (a,), bw_const, "mul")
    a = as_tensor(a, b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    keep = out > 0

    def bw(g):
        return (g * keep,)

    return _result(out, (x,), bw, "relu")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; the identity when not training or ``rate == 0``."""
    if not train or rate <= 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype)
    keep *= x.dtype.type(1.0 / (1.0 - rate))
    return mul(x, keep)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(old),)

    return _result(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose needs rank >= 2, got shape {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _result(out, (x,), bw, "transpose")


def take_rows(weight: Tensor, ids) -> Tensor:
    """Embedding lookup: ``weight[ids]`` for an integer array ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"row index out of range for table of shape {weight.shape}")
    out = weight.data[ids]

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _result(out, (weight,), bw, "take_rows")


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def bw(g):
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return _result(out, (x,), bw, "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return mul(sum_all(x), 1.0 / n)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # activations times a weight matrix: one flat GEMM each way
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*lead, b.shape[-1])

        def bw_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _result(out, (a, b), bw_flat, "matmul")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), bw, "matmul")


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``x`` where True marks an
    allowed entry. Masked entries come out as exact zeros and receive no
    gradient. A row with no allowed entry raises ``DegenerateMaskError``.
    """
    data = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(mask, np.broadcast_shapes(mask.shape, data.shape)).any(axis=-1).all():
            raise DegenerateMaskError("softmax row has every entry masked")
        data = np.where(mask, data, -np.inf)
    shifted = data - data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), bw, "softmax_rows")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last dim {d} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(x.dtype)
    out = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx.astype(x.dtype), (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), bw, "layer_norm")


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels, label_smoothing: float = 0.0,
                  ignore_index: int = 0) -> Tensor:
    """Mean label-smoothed negative log-likelihood over non-ignored rows.

    The smoothed target puts ``1 - eps`` on the gold class and spreads
    ``eps`` uniformly over all ``V`` classes.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [n, V] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, V = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {labels.shape[0]} labels")
    valid = labels != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyBatchError("every position carries ignore_index")
    if ((labels[valid] < 0) | (labels[valid] >= V)).any():
        raise DimensionError(f"label outside [0, {V})")
    eps = float(label_smoothing)
    logp = log_softmax_np(logits.data)
    rows = np.nonzero(valid)[0]
    gold = logp[rows, labels[rows]]
    per_row = -(1.0 - eps) * gold - eps * logp[rows].mean(axis=-1)
    out = np.asarray(per_row.sum() / n_valid, dtype=logits.dtype)

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels[rows]] -= 1.0 - eps
        grad -= eps / V
        grad[~valid] = 0.0
        return ((grad * (g / n_valid)).astype(logits.dtype),)

    return _result(out, (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``t``.

    Leaf gradients add onto whatever is already stored, so callers zero them
    between optimisation steps.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

