"""A small dense tensor with reverse-mode differentiation.

Only the operations needed by the transformer, the LoRA adapters and the
training objectives are implemented. Every op builds its output from numpy
arrays and, when any input requires a gradient, records a closure that maps
the output gradient to input gradients.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class DomainError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _result(data, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("multiply", a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), "multiply", back)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), "neg", lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: input contains non-positive values")
    return _result(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    """``log(sigmoid(x)) = -softplus(-x)`` without overflow."""
    x = a.data
    out = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))

    def back(g):
        # d/dx log sigmoid(x) = 1 - sigmoid(x) = sigmoid(-x)
        return (g * np.exp(out - x),)

    return _result(out.astype(x.dtype, copy=False), (a,), "log_sigmoid", back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), "gelu", back)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout: a random generator is required in training mode")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    return _result(a.data * keep, (a,), "dropout", lambda g: (g * keep,))


# --------------------------------------------------------------------------
# reductions and shape ops


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), "sum", back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} into {shape}") from None
    return _result(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", "needs at least one input")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError("concat", f"shape {t.shape} does not match {tensors[0].shape} off axis {ax}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _result(out, tensors, "concat", back)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``a`` to ``[start, stop)`` along ``axis``."""
    ax = axis % a.ndim
    sl = tuple(slice(start, stop) if i == ax else slice(None) for i in range(a.ndim))

    def back(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return _result(a.data[sl], (a,), "narrow", back)


def row_select(a: Tensor, index) -> Tensor:
    """Pick ``a[b, index[b]]`` for every leading index ``b``.

    ``a`` has shape ``[B, T, ...]`` and ``index`` shape ``[B]``; the result has
    shape ``[B, ...]``.
    """
    index = np.asarray(index, dtype=np.int64)
    if a.ndim < 2 or index.shape != (a.shape[0],):
        raise ShapeError("row_select", f"input {a.shape} with index {index.shape}")
    if np.any(index < 0) or np.any(index >= a.shape[1]):
        raise ShapeError("row_select", f"index out of range for axis of length {a.shape[1]}")
    rows = np.arange(a.shape[0])
    out = a.data[rows, index]

    def back(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return _result(out, (a,), "row_select", back)


def gather_last(a: Tensor, index) -> Tensor:
    """``out[..., ] = a[..., index[...]]`` along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ShapeError("gather", f"input {a.shape} with index {index.shape}")
    if np.any(index < 0) or np.any(index >= a.shape[-1]):
        raise ShapeError("gather", f"index out of range for last axis of length {a.shape[-1]}")
    out = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]

    def back(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return _result(out, (a,), "gather", back)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError("embedding", f"weight must be 2-d, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", f"id outside [0, {weight.shape[0]})")
    out = weight.data[ids]

    def back(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _result(out, (weight,), "embedding", back)


# --------------------------------------------------------------------------
# linear algebra and normalizations


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", f"cannot batch {a.shape} @ {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if a.ndim == 1:
            gb = np.outer(a.data, g)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), "matmul", back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), "softmax", back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), "log_softmax", back)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    if weight.shape != (x.shape[-1],):
        raise ShapeError("rms_norm", f"weight {weight.shape} does not match last dim of {x.shape}")
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + x.dtype.type(eps))
    xhat = x.data * r
    out = xhat * weight.data

    def back(g):
        gxhat = g * weight.data
        gw = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        gx = r * (gxhat - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True))
        return gx, gw

    return _result(out, (x, weight), "rms_norm", back)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, key_mask=None) -> Tensor:
    """Scaled dot-product attention with a strict causal mask.

    ``q, k, v`` have shape ``[B, H, T, dh]``. ``key_mask`` (``[B, T]`` bits)
    additionally hides padding keys. Query rows that can see no key produce
    zeros.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise ShapeError("attention", f"q {q.shape}, k {k.shape}, v {v.shape} must match as [B,H,T,dh]")
    B, H, T, dh = q.shape
    scale = q.dtype.type(1.0 / math.sqrt(dh))
    visible = np.tril(np.ones((T, T), dtype=bool))[None, None]
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (B, T):
            raise ShapeError("attention", f"key mask {key_mask.shape} does not match [B,T]=({B},{T})")
        visible = visible & key_mask[:, None, None, :]
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    scores = np.where(visible, scores, -np.inf)
    row_max = scores.max(axis=-1, keepdims=True)
    any_visible = np.isfinite(row_max)
    e = np.exp(scores - np.where(any_visible, row_max, 0))
    denom = e.sum(axis=-1, keepdims=True)
    probs = np.where(any_visible, e / np.where(denom > 0, denom, 1), 0).astype(q.dtype, copy=False)
    out = np.matmul(probs, v.data)

    def back(g):
        gv = np.matmul(np.swapaxes(probs, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True))
        gq = np.matmul(gs, k.data) * scale
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data) * scale
        return gq, gk, gv

    return _result(out, (q, k, v), "attention", back)


# --------------------------------------------------------------------------
# graph traversal


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Leaf gradients add up across calls; interior nodes get the gradient of
    the current call only.
    """
    if loss.size != 1:
        raise ShapeError("backward", f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# generic dispatch

OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": lambda xs, **kw: matmul(*xs),
    "add": lambda xs, **kw: add(*xs),
    "multiply": lambda xs, **kw: mul(*xs),
    "embedding": lambda xs, ids, **kw: embedding(xs[0], ids),
    "softmax": lambda xs, axis=-1: softmax(xs[0], axis),
    "log_softmax": lambda xs, axis=-1: log_softmax(xs[0], axis),
    "sigmoid": lambda xs: sigmoid(xs[0]),
    "log_sigmoid": lambda xs: log_sigmoid(xs[0]),
    "rms_norm": lambda xs, eps=1e-6: rms_norm(xs[0], xs[1], eps),
    "gelu": lambda xs: gelu(xs[0]),
    "attention": lambda xs, key_mask=None: causal_attention(*xs, key_mask=key_mask),
    "dropout": lambda xs, p, rng=None, training=True: dropout(xs[0], p, rng, training),
    "row_select": lambda xs, index: row_select(xs[0], index),
    "concat": lambda xs, axis=0: concat(xs, axis),
    "log": lambda xs: log(xs[0]),
    "exp": lambda xs: exp(xs[0]),
    "sum": lambda xs, axis=None: sum_(xs[0], axis),
    "reshape": lambda xs, shape: reshape(xs[0], shape),
    "transpose": lambda xs, axes=None: transpose(xs[0], axes),
    "narrow": lambda xs, axis, start, stop: narrow(xs[0], axis, start, stop),
}


def apply(op_kind: str, inputs: Sequence[Tensor], params: dict | None = None) -> Tensor:
    """Run a catalogued op by name."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(list(inputs), **(params or {}))


# --------------------------------------------------------------------------
# numerical oracle


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` recomputes the scalar loss from the current parameter values. Each
    checked entry contributes ``|fd - g| / max(1, |g|)``. ``max_entries``
    limits the number of entries sampled per parameter.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(flat[i])
            with no_grad():
                up = float(np.asarray(f().data, dtype=np.float64).sum())
            flat[i] = orig - eps
            minus = float(flat[i])
            with no_grad():
                down = float(np.asarray(f().data, dtype=np.float64).sum())
            flat[i] = orig
            # divide by the step actually stored, which rounding may shift off 2*eps
            fd = (up - down) / (plus - minus)
            g = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(fd - g) / max(1.0, abs(g)))
    for p in params:
        p.grad = None
    return worst
