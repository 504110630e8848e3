"""Dense NCHW tensor primitives.

Tensors are plain ``numpy.ndarray`` objects of rank 4 (batch, channel, height,
width).  Storage is float32; float64 inputs are kept in float64 so the same
code serves gradient checking.  Convolution reductions always accumulate in
float64 and are cast back to the input precision.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_SLOPE = 0.05


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(dtype)
    if arr.ndim != 4:
        raise DimensionError(f"expected a rank-4 (n, c, h, w) tensor, got shape {arr.shape}")
    return arr


def _float_type(*arrays) -> np.dtype:
    dt = np.result_type(*[a.dtype for a in arrays if a is not None])
    return np.dtype(np.float64) if dt == np.float64 else np.dtype(np.float32)


@dataclass
class ConvParams:
    """A static convolution: weight (D, C/groups, k, k) and bias (D,)."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        if self.bias is None:
            self.bias = np.zeros(self.weight.shape[0], dtype=self.weight.dtype)
        self.bias = np.asarray(self.bias)
        if self.weight.ndim != 4:
            raise DimensionError(f"conv weight must be rank 4, got {self.weight.shape}")
        d, cg, kh, kw = self.weight.shape
        if kh != kw or kh % 2 == 0:
            raise DimensionError(f"kernel must be square with odd size, got {kh}x{kw}")
        if self.bias.shape != (d,):
            raise DimensionError(f"bias shape {self.bias.shape} does not match {d} output channels")
        if d % self.groups:
            raise DimensionError(f"output channels {d} not divisible by groups={self.groups}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def num_params(self) -> int:
        return self.weight.size + self.bias.size

    def copy(self) -> "ConvParams":
        return ConvParams(self.weight.copy(), self.bias.copy(), self.stride, self.padding, self.groups)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """Zero-padded cross-correlation, output (n, D, ho, wo)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    d, cg, k, _ = weight.shape
    if c != cg * groups:
        raise DimensionError(f"channel axis: input has {c} channels, weight expects {cg * groups}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1:
        raise DimensionError(f"height axis: {h} too small for k={k}, padding={padding}")
    if wo < 1:
        raise DimensionError(f"width axis: {w} too small for k={k}, padding={padding}")
    out_dtype = _float_type(x, weight, bias)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp.astype(np.float64, copy=False), k, stride)
    wt = weight.astype(np.float64, copy=False)
    if groups == 1:
        out = np.tensordot(win, wt, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        win = win.reshape(n, groups, cg, ho, wo, k, k)
        wt = wt.reshape(groups, d // groups, cg, k, k)
        out = np.einsum("ngchwij,gdcij->ngdhw", win, wt, optimize=True).reshape(n, d, ho, wo)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64).reshape(1, d, 1, 1)
    return np.ascontiguousarray(out, dtype=out_dtype)


def conv2d_params(x: np.ndarray, p: ConvParams) -> np.ndarray:
    return conv2d(x, p.weight, p.bias, p.stride, p.padding, p.groups)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray,
                    stride: int, padding: int, groups: int):
    """Gradients of ``conv2d`` w.r.t. input, weight and bias."""
    n, c, h, w = x.shape
    d, cg, k, _ = weight.shape
    _, _, ho, wo = grad_out.shape
    g64 = grad_out.astype(np.float64, copy=False)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp.astype(np.float64, copy=False), k, stride)
    wt = weight.astype(np.float64, copy=False)
    if groups == 1:
        gw = np.tensordot(g64, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g64, wt, axes=([1], [0]))  # n, ho, wo, c, k, k
        cols = cols.transpose(0, 3, 1, 2, 4, 5)
    else:
        gg = g64.reshape(n, groups, d // groups, ho, wo)
        winr = win.reshape(n, groups, cg, ho, wo, k, k)
        wtr = wt.reshape(groups, d // groups, cg, k, k)
        gw = np.einsum("ngdhw,ngchwij->gdcij", gg, winr, optimize=True).reshape(d, cg, k, k)
        cols = np.einsum("ngdhw,gdcij->ngchwij", gg, wtr, optimize=True).reshape(n, c, ho, wo, k, k)
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[..., i, j]
    gx = gxp[:, :, padding:padding + h, padding:padding + w]
    gb = g64.sum(axis=(0, 2, 3))
    return gx, gw, gb


def pixel_shuffle(x: np.ndarray, s: int) -> np.ndarray:
    """(n, c*s*s, h, w) -> (n, c, h*s, w*s)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if s < 1 or c % (s * s):
        raise DimensionError(f"channel axis: {c} not divisible by scale^2={s * s}")
    oc = c // (s * s)
    return x.reshape(n, oc, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, oc, h * s, w * s)


def pixel_unshuffle(x: np.ndarray, s: int) -> np.ndarray:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if s < 1 or h % s or w % s:
        raise DimensionError(f"spatial axes {h}x{w} not divisible by scale {s}")
    return x.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h // s, w // s)


def _check_broadcast(x: np.ndarray, y) -> None:
    if np.isscalar(y):
        return
    y = np.asarray(y)
    if y.shape == x.shape:
        return
    n, c, _, _ = x.shape
    if y.ndim == 4 and y.shape in ((n, 1, 1, 1), (1, c, 1, 1), (n, c, 1, 1), (1, 1, 1, 1)):
        return
    raise DimensionError(f"cannot broadcast {y.shape} against {x.shape}")


def add(x, y):
    x = as_tensor(x)
    _check_broadcast(x, y)
    return x + y


def multiply(x, y):
    x = as_tensor(x)
    _check_broadcast(x, y)
    return x * y


def channel_scale(x, s):
    """Scale channels of ``x`` by ``s`` of shape (c,) or (n, c)."""
    x = as_tensor(x)
    s = np.asarray(s, dtype=x.dtype)
    if s.ndim == 1:
        s = s.reshape(1, -1, 1, 1)
    elif s.ndim == 2:
        s = s.reshape(s.shape[0], s.shape[1], 1, 1)
    _check_broadcast(x, s)
    return x * s


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def leaky_relu(x, slope: float = DEFAULT_SLOPE):
    x = np.asarray(x)
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def relu(x):
    return np.maximum(x, 0)


def channel_softmax(x):
    x = np.asarray(x)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def concat(tensors) -> np.ndarray:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise DimensionError(f"concat needs equal n,h,w: {tensors[0].shape} vs {t.shape}")
    return np.concatenate(tensors, axis=1)


def global_avg_pool(x) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[2] * x.shape[3] == 0:
        raise DimensionError("global_avg_pool over an empty spatial extent")
    return x.astype(np.float64).mean(axis=(2, 3), keepdims=True).astype(x.dtype)


def max_pool2d(x, k: int, stride: int):
    """Valid (unpadded) max pooling; returns values and flat argmax inside each window."""
    x = as_tensor(x)
    ho = conv_output_size(x.shape[2], k, stride, 0)
    wo = conv_output_size(x.shape[3], k, stride, 0)
    if ho < 1 or wo < 1:
        raise DimensionError(f"spatial extent {x.shape[2]}x{x.shape[3]} smaller than pool window {k}")
    win = _windows(x, k, stride)
    flat = win.reshape(*win.shape[:4], k * k)
    idx = flat.argmax(axis=-1)
    return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], idx


def max_pool2d_backward(grad_out, idx, in_shape, k: int, stride: int):
    n, c, h, w = in_shape
    _, _, ho, wo = grad_out.shape
    gx = np.zeros(in_shape, dtype=np.float64)
    di, dj = np.divmod(idx, k)
    rows = np.arange(ho).reshape(1, 1, ho, 1) * stride + di
    cols = np.arange(wo).reshape(1, 1, 1, wo) * stride + dj
    nn_ = np.arange(n).reshape(n, 1, 1, 1)
    cc = np.arange(c).reshape(1, c, 1, 1)
    np.add.at(gx, (nn_, cc, rows, cols), grad_out)
    return gx


def bilinear_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Row-stochastic (out, in) interpolation matrix, half-pixel centers, edge clamp."""
    m = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for o in range(out_size):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        t = src - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> np.ndarray:
    x = as_tensor(x)
    mh = bilinear_matrix(out_h, x.shape[2])
    mw = bilinear_matrix(out_w, x.shape[3])
    out = np.einsum("oh,nchw,pw->ncop", mh, x.astype(np.float64), mw, optimize=True)
    return out.astype(x.dtype)
