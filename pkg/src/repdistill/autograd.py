"""Minimal reverse-mode differentiation over the tensor primitives.

A :class:`Var` wraps an ndarray and remembers how it was produced.  Calling
:func:`backward` on a scalar walks the recorded graph in reverse topological
order.  Gradients are accumulated in float64 and cast to each primal's dtype.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping

import numpy as np

from . import tensor as T


class ContractError(ValueError):
    """A caller violated a documented precondition."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Var:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Var):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(o))

    def __rsub__(self, o):
        return add(o, neg(self))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return mul(self, reciprocal(o))

    def __rtruediv__(self, o):
        return mul(o, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def const(x, like: Var | None = None) -> Var:
    if isinstance(x, Var):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype != like.dtype:
        arr = arr.astype(like.dtype)
    return Var(arr)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Var:
    out = Var(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Var) and not isinstance(b, Var):
        b = const(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Var) and not isinstance(a, Var):
        a = const(np.asarray(a, dtype=b.dtype))
    return const(a), const(b)


def add(a, b) -> Var:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Var:
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Var:
    a = const(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def reciprocal(a) -> Var:
    a = const(a)
    r = 1.0 / a.data
    return _make(r, (a,), lambda g: (-g * r * r,))


def square(a: Var) -> Var:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Var) -> Var:
    r = np.sqrt(a.data)
    return _make(r, (a,), lambda g: (g * 0.5 / r,))


def abs_(a: Var) -> Var:
    # subgradient 0 at ties
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a: Var) -> Var:
    r = np.exp(a.data)
    return _make(r, (a,), lambda g: (g * r,))


def sigmoid(a: Var) -> Var:
    s = T.sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Var) -> Var:
    return _make(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),))


def leaky_relu(a: Var, slope: float = T.DEFAULT_SLOPE) -> Var:
    pos = a.data >= 0
    return _make(T.leaky_relu(a.data, slope), (a,), lambda g: (np.where(pos, g, g * slope),))


def sum_(a: Var, axis=None, keepdims=False) -> Var:
    a = const(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), bw)


def mean(a: Var, axis=None, keepdims=False) -> Var:
    a = const(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def reshape(a: Var, shape) -> Var:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Var, axes) -> Var:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Var, idx) -> Var:
    def bw(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[idx] += g  # basic slicing only, so no repeated targets
        return (full,)

    return _make(a.data[idx], (a,), bw)


def concat(vars_: Iterable[Var], axis: int = 1) -> Var:
    vars_ = [const(v) for v in vars_]
    if not vars_:
        raise T.DimensionError("concat of an empty list")
    if axis == 1 and vars_[0].ndim == 4:
        data = T.concat([v.data for v in vars_])
    else:
        data = np.concatenate([v.data for v in vars_], axis=axis)
    splits = np.cumsum([v.shape[axis] for v in vars_])[:-1]
    return _make(data, tuple(vars_), lambda g: tuple(np.split(g, splits, axis=axis)))


def einsum(spec: str, a, b) -> Var:
    """Two-operand einsum; every index of an operand must appear in the output or the other operand."""
    a, b = _pair(a, b)
    ins, out = spec.split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if any(ch not in out and ch not in other for ch in s):
            raise ContractError(f"einsum {spec!r}: index reduced within a single operand")
    data = np.einsum(spec, a.data.astype(np.float64), b.data.astype(np.float64), optimize=True)
    dt = T._float_type(a.data, b.data)

    def bw(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, b.data.astype(np.float64), optimize=True)
        gb = np.einsum(f"{out},{sa}->{sb}", g, a.data.astype(np.float64), optimize=True)
        return ga, gb

    return _make(data.astype(dt), (a, b), bw)


def matmul(a, b) -> Var:
    return einsum("ij,jk->ik", a, b)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Var:
    x = const(x)
    weight = const(weight, like=x)
    parents = (x, weight) if bias is None else (x, weight, const(bias, like=x))
    out = T.conv2d(x.data, weight.data, None if bias is None else parents[2].data, stride, padding, groups)

    def bw(g):
        gx, gw, gb = T.conv2d_backward(g, x.data, weight.data, stride, padding, groups)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, parents, bw)


def pad_const(x: Var, pad: int, value) -> Var:
    """Pad spatial borders of ``x`` with a per-channel constant ``value`` of shape (c,)."""
    x = const(x)
    value = const(value, like=x)
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.empty((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[...] = value.data.reshape(1, c, 1, 1)
    out[:, :, pad:pad + h, pad:pad + w] = x.data

    def bw(g):
        inner = g[:, :, pad:pad + h, pad:pad + w]
        ring = g.sum(axis=(0, 2, 3)) - inner.sum(axis=(0, 2, 3))
        return inner, ring.reshape(value.shape)

    return _make(out, (x, value), bw)


def max_pool2d(x: Var, k: int, stride: int) -> Var:
    out, idx = T.max_pool2d(x.data, k, stride)
    return _make(out, (x,), lambda g: (T.max_pool2d_backward(g, idx, x.shape, k, stride),))


def bilinear_resize(x: Var, out_h: int, out_w: int) -> Var:
    mh = T.bilinear_matrix(out_h, x.shape[2])
    mw = T.bilinear_matrix(out_w, x.shape[3])
    out = np.einsum("oh,nchw,pw->ncop", mh, x.data.astype(np.float64), mw, optimize=True)
    return _make(out.astype(x.dtype), (x,),
                 lambda g: (np.einsum("oh,ncop,pw->nchw", mh, g, mw, optimize=True),))


def pixel_shuffle(x: Var, s: int) -> Var:
    return _make(T.pixel_shuffle(x.data, s), (x,), lambda g: (T.pixel_unshuffle(g, s),))


def channel_softmax(x: Var) -> Var:
    """Softmax over axis 1 for any rank >= 2."""
    y = T.channel_softmax(x.data)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (x,), bw)


def global_avg_pool(x: Var) -> Var:
    if x.shape[2] * x.shape[3] == 0:
        raise T.DimensionError("global_avg_pool over an empty spatial extent")
    return mean(x, axis=(2, 3), keepdims=True)


def l1_loss(pred: Var, target) -> Var:
    return mean(abs_(pred - const(target, like=pred)))


def l2_loss(pred: Var, target) -> Var:
    return mean(square(pred - const(target, like=pred)))


def _toposort(root: Var) -> list[Var]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def backward(loss: Var, params=None) -> dict:
    """Back-propagate a scalar ``loss``.

    ``params`` may be a mapping name -> Var or an iterable of Vars.  The
    returned dict uses the same keys (names, or the Vars themselves) and holds
    zero arrays for parameters the loss does not depend on.  Each reached
    parameter also gets its ``.grad`` set.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    for node in _toposort(loss):
        g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    if params is None:
        return {}
    items = params.items() if isinstance(params, Mapping) else ((p, p) for p in params)
    result = {}
    for key, p in items:
        g = grads.get(id(p))
        g = np.zeros(p.shape, dtype=p.dtype) if g is None else np.asarray(g).reshape(p.shape).astype(p.dtype)
        p.grad = g
        result[key] = g
    return result


def grad_check(fn: Callable[[], Var], params: Mapping[str, Var], h: float = 1e-5,
               max_checks: int = 12, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` re-evaluates the scalar loss from the current parameter values.  Up
    to ``max_checks`` randomly chosen entries of each parameter are perturbed.
    The error for one entry is ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    rng = np.random.default_rng(seed)
    analytic = backward(fn(), params)
    worst = 0.0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            picks = np.arange(flat.size)
            if flat.size > max_checks:
                picks = rng.choice(flat.size, size=max_checks, replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(fn().data.sum())
                flat[i] = orig - h
                fm = float(fn().data.sum())
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                a = float(analytic[name].reshape(-1)[i])
                worst = max(worst, abs(a - numeric) / max(1e-8, abs(numeric)))
    return worst
