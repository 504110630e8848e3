"""Structural reparameterization: multi-branch graphs collapsed into one convolution.

A branch graph is built from five node kinds (conv, batch norm, average
pool, identity, per-channel scale) composed with :class:`Sequence` and
:class:`ParallelSum`.  The same graph object trains (it is a ``Module``) and
fuses (:func:`fuse_branch_graph` reads its eval-mode values).

Padding inside a sequence follows the diverse-branch-block convention: a
spatial node that follows a 1x1 stage pads its input with the constant that
the preceding stages emit for an all-zero input, not with zero.  That keeps
the collapsed convolution exact on border pixels too.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Var
from .nn import BatchNorm2d, Conv2d, Module, ModuleList, Parameter
from .tensor import ConvParams, DimensionError

MAX_SEQUENCE = 4


class FusionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# nodes


class AvgPool(Module):
    """Stride-1 average pool with ``k // 2`` padding (pad cells count in the mean)."""

    def __init__(self, channels: int, k: int, groups: int = 1):
        super().__init__()
        self.channels, self.k, self.groups = channels, k, groups

    def forward(self, x, pad_value=None):
        c = self.channels
        weight = np.full((c, 1, self.k, self.k), 1.0 / (self.k * self.k), dtype=ag.const(x).dtype)
        p = self.k // 2
        if pad_value is None:
            return ag.conv2d(x, weight, None, 1, p, groups=c)
        return ag.conv2d(ag.pad_const(x, p, pad_value), weight, None, 1, 0, groups=c)

    def respond_const(self, c: Var) -> Var:
        return c

    def to_params(self) -> ConvParams:
        return pool_as_conv(self.channels, self.k, dense=self.groups == 1)


class Identity(Module):
    def __init__(self, channels: int, groups: int = 1):
        super().__init__()
        self.channels, self.groups = channels, groups

    def forward(self, x, pad_value=None):
        return ag.const(x)

    def respond_const(self, c: Var) -> Var:
        return c

    def to_params(self) -> ConvParams:
        return identity_as_conv(self.channels, dense=self.groups == 1)


class Scale(Module):
    def __init__(self, channels: int, init: float = 1.0):
        super().__init__()
        self.weight = Parameter(np.full(channels, init, np.float32))

    def forward(self, x, pad_value=None):
        return ag.const(x) * self.weight.reshape(1, -1, 1, 1)

    def respond_const(self, c: Var) -> Var:
        return c * self.weight


def _conv_respond(conv: Conv2d, c: Var) -> Var:
    """Response of a convolution to a spatially constant input ``c`` (per channel)."""
    g = conv.groups
    d, cg = conv.weight.shape[:2]
    wsum = ag.sum_(conv.weight, axis=(2, 3)).reshape(g, d // g, cg)
    out = ag.einsum("gdc,gc->gd", wsum, ag.const(c, like=conv.weight).reshape(g, cg)).reshape(d)
    return out if conv.bias is None else out + conv.bias


def _bn_respond(bn: BatchNorm2d, c: Var) -> Var:
    if bn._last_affine is None:
        bn.affine()
    scale, shift = bn._last_affine
    return c * scale + shift


def _node_forward(node, x, pad_value):
    if isinstance(node, Conv2d):
        if pad_value is None or node.padding == 0:
            return node(x)
        return ag.conv2d(ag.pad_const(x, node.padding, pad_value), node.weight, node.bias,
                         node.stride, 0, node.groups)
    if isinstance(node, BatchNorm2d):
        return node(x)
    return node.forward(x, pad_value)


def respond_const(node, c: Var) -> Var:
    """Per-channel output of ``node`` for a spatially constant input ``c``."""
    if isinstance(node, Conv2d):
        return _conv_respond(node, c)
    if isinstance(node, BatchNorm2d):
        return _bn_respond(node, c)
    return node.respond_const(c)


class Sequence(Module):
    def __init__(self, nodes):
        super().__init__()
        nodes = list(nodes)
        if not nodes:
            raise FusionError("empty sequence")
        if len(nodes) > MAX_SEQUENCE:
            raise FusionError(f"sequence of {len(nodes)} nodes exceeds the supported depth {MAX_SEQUENCE}")
        self.nodes = ModuleList(nodes)

    def forward(self, x, pad_value=None):
        cur = ag.const(x)
        pad = pad_value  # None: the sequence input is zero padded
        for node in self.nodes:
            zero_in = pad if pad is not None else Var(np.zeros(cur.shape[1], cur.dtype))
            cur = _node_forward(node, cur, pad)
            pad = respond_const(node, zero_in)
        return cur

    def respond_const(self, c: Var) -> Var:
        for node in self.nodes:
            c = respond_const(node, c)
        return c


class ParallelSum(Module):
    def __init__(self, branches):
        super().__init__()
        branches = list(branches)
        if not branches:
            raise FusionError("parallel sum needs at least one branch")
        self.branches = ModuleList(branches)

    def forward(self, x, pad_value=None):
        outs = [_node_forward(b, x, pad_value) if not isinstance(b, (Sequence, ParallelSum))
                else b.forward(x, pad_value) for b in self.branches]
        shapes = {o.shape for o in outs}
        if len(shapes) != 1:
            raise DimensionError(f"parallel branches disagree on output shape: {sorted(shapes)}")
        total = outs[0]
        for o in outs[1:]:
            total = total + o
        return total

    def respond_const(self, c: Var) -> Var:
        total = None
        for b in self.branches:
            r = respond_const(b, c)
            total = r if total is None else total + r
        return total


# ---------------------------------------------------------------------------
# ConvParams algebra


def pool_as_conv(channels: int, k: int, dense: bool = True) -> ConvParams:
    if dense:
        w = np.zeros((channels, channels, k, k), np.float32)
        w[np.arange(channels), np.arange(channels)] = 1.0 / (k * k)
        return ConvParams(w, np.zeros(channels, np.float32), 1, k // 2, 1)
    w = np.full((channels, 1, k, k), 1.0 / (k * k), np.float32)
    return ConvParams(w, np.zeros(channels, np.float32), 1, k // 2, channels)


def identity_as_conv(channels: int, dense: bool = True) -> ConvParams:
    if dense:
        w = np.zeros((channels, channels, 1, 1), np.float32)
        w[np.arange(channels), np.arange(channels)] = 1.0
        return ConvParams(w, np.zeros(channels, np.float32), 1, 0, 1)
    return ConvParams(np.ones((channels, 1, 1, 1), np.float32), np.zeros(channels, np.float32), 1, 0, channels)


def densify(p: ConvParams) -> ConvParams:
    """Expand a grouped convolution into the equivalent groups=1 form."""
    if p.groups == 1:
        return p
    d, cg, k, _ = p.weight.shape
    g = p.groups
    dg = d // g
    w = np.zeros((d, cg * g, k, k), p.weight.dtype)
    for gi in range(g):
        w[gi * dg:(gi + 1) * dg, gi * cg:(gi + 1) * cg] = p.weight[gi * dg:(gi + 1) * dg]
    return ConvParams(w, p.bias.copy(), p.stride, p.padding, 1)


def fuse_conv_bn(conv: ConvParams, gamma, beta, mean, var, eps: float = 1e-5) -> ConvParams:
    gamma, beta, mean, var = (np.asarray(a, np.float64) for a in (gamma, beta, mean, var))
    if gamma.shape != (conv.out_channels,):
        raise FusionError(f"batch norm has {gamma.shape[0]} channels, conv outputs {conv.out_channels}")
    denom = var + eps
    if np.any(denom <= 0):
        raise FusionError("batch norm variance + eps must be positive")
    t = gamma / np.sqrt(denom)
    dt = conv.weight.dtype
    w = (conv.weight * t.reshape(-1, 1, 1, 1)).astype(dt)
    b = (beta + (conv.bias - mean) * t).astype(dt)
    return ConvParams(w, b, conv.stride, conv.padding, conv.groups)


def fuse_scale(conv: ConvParams, s) -> ConvParams:
    s = np.asarray(s, np.float64)
    return ConvParams((conv.weight * s.reshape(-1, 1, 1, 1)).astype(conv.weight.dtype),
                      (conv.bias * s).astype(conv.bias.dtype), conv.stride, conv.padding, conv.groups)


def embed_kernel(p: ConvParams, k_target: int) -> ConvParams:
    k = p.k
    if k > k_target:
        raise FusionError(f"cannot embed a {k}x{k} kernel into {k_target}x{k_target}")
    if (k_target - k) % 2:
        raise FusionError("kernel sizes must both be odd")
    m = (k_target - k) // 2
    w = np.pad(p.weight, ((0, 0), (0, 0), (m, m), (m, m)))
    return ConvParams(w, p.bias.copy(), p.stride, p.padding + m, p.groups)


def fuse_sequential(first: ConvParams, second: ConvParams) -> ConvParams:
    """Collapse ``second(first(x))`` where ``first`` is 1x1 (or ``second`` is an unpadded 1x1)."""
    if first.groups != second.groups:
        first, second = densify(first), densify(second)
    if first.out_channels != second.in_channels:
        raise FusionError(f"channel chain broken: {first.out_channels} -> {second.in_channels}")
    g = first.groups
    f64 = np.float64
    if first.k == 1 and first.stride == 1 and first.padding == 0:
        d, mg, k, _ = second.weight.shape
        cg = first.weight.shape[1]
        w1 = first.weight.astype(f64).reshape(g, mg, cg)
        w2 = second.weight.astype(f64).reshape(g, d // g, mg, k, k)
        w = np.einsum("gdmij,gmc->gdcij", w2, w1).reshape(d, cg, k, k)
        b = second.bias + np.einsum("gdmij,gm->gd", w2, first.bias.astype(f64).reshape(g, mg)).reshape(d)
        return ConvParams(w.astype(second.weight.dtype), b.astype(second.bias.dtype),
                          second.stride, second.padding, g)
    if second.k == 1 and second.stride == 1 and second.padding == 0:
        d, mg = second.weight.shape[:2]
        _, cg, k, _ = first.weight.shape
        w2 = second.weight.astype(f64).reshape(g, d // g, mg)
        w1 = first.weight.astype(f64).reshape(g, mg, cg, k, k)
        w = np.einsum("gdm,gmcij->gdcij", w2, w1).reshape(d, cg, k, k)
        b = second.bias + np.einsum("gdm,gm->gd", w2, first.bias.astype(f64).reshape(g, mg)).reshape(d)
        return ConvParams(w.astype(first.weight.dtype), b.astype(first.bias.dtype), first.stride, first.padding, g)
    raise FusionError(f"sequential fusion needs a 1x1 stage; got {first.k}x{first.k} then {second.k}x{second.k}")


def fuse_parallel_sum(branches) -> ConvParams:
    branches = list(branches)
    if not branches:
        raise FusionError("nothing to sum")
    ref = branches[0]
    geo = lambda p: (p.weight.shape, p.stride, p.padding, p.groups)
    for p in branches[1:]:
        if geo(p) != geo(ref):
            raise FusionError(f"branch geometry mismatch: {geo(p)} vs {geo(ref)}")
    w = np.sum([p.weight.astype(np.float64) for p in branches], axis=0)
    b = np.sum([p.bias.astype(np.float64) for p in branches], axis=0)
    return ConvParams(w.astype(ref.weight.dtype), b.astype(ref.bias.dtype), ref.stride, ref.padding, ref.groups)


def _node_params(node) -> ConvParams:
    if isinstance(node, ConvParams):
        return node
    if isinstance(node, Conv2d):
        return node.to_params()
    if isinstance(node, (AvgPool, Identity)):
        return node.to_params()
    if isinstance(node, Sequence):
        return _sequence_params(node)
    if isinstance(node, ParallelSum):
        return _parallel_params(node)
    raise FusionError(f"unsupported node {type(node).__name__}")


def _sequence_params(seq: Sequence) -> ConvParams:
    acc = None
    for node in seq.nodes:
        if isinstance(node, BatchNorm2d):
            if acc is None:
                raise FusionError("batch norm cannot open a sequence")
            acc = fuse_conv_bn(acc, node.weight.data, node.bias.data, node.running_mean, node.running_var, node.eps)
        elif isinstance(node, Scale):
            if acc is None:
                raise FusionError("scale cannot open a sequence")
            acc = fuse_scale(acc, node.weight.data)
        else:
            p = _node_params(node)
            acc = p if acc is None else fuse_sequential(acc, p)
    return acc


def _parallel_params(ps: ParallelSum) -> ConvParams:
    parts = [_node_params(b) for b in ps.branches]
    k = max(p.k for p in parts)
    parts = [embed_kernel(p, k) for p in parts]
    if len({p.groups for p in parts}) > 1:
        parts = [densify(p) for p in parts]
    return fuse_parallel_sum(parts)


def fuse_branch_graph(g, k_target: int | None = None) -> ConvParams:
    """Collapse a branch graph (eval-mode batch norm) into one convolution."""
    p = _node_params(g)
    if k_target is not None and p.k != k_target:
        p = embed_kernel(p, k_target)
    return p


# ---------------------------------------------------------------------------
# canonical blocks

REP_STYLES = ("static", "repvgg", "dbb")


def repvgg_graph(c_in: int, c_out: int, k: int = 3, groups: int = 1, rng=None) -> ParallelSum:
    rng = rng if rng is not None else np.random.default_rng(0)
    branches = [
        Sequence([Conv2d(c_in, c_out, k, groups=groups, bias=False, rng=rng), BatchNorm2d(c_out)]),
        Sequence([Conv2d(c_in, c_out, 1, groups=groups, bias=False, rng=rng), BatchNorm2d(c_out)]),
    ]
    if c_in == c_out:
        branches.append(Sequence([Identity(c_in, groups=1 if groups == 1 else c_in), BatchNorm2d(c_out)]))
    return ParallelSum(branches)


def dbb_graph(c_in: int, c_out: int, k: int = 3, groups: int = 1, rng=None) -> ParallelSum:
    """Four-branch diverse branch block: kxk, 1x1, 1x1-avgpool, 1x1-kxk, each with batch norm."""
    rng = rng if rng is not None else np.random.default_rng(0)
    pool_groups = 1 if groups == 1 else c_out
    return ParallelSum([
        Sequence([Conv2d(c_in, c_out, k, groups=groups, bias=False, rng=rng), BatchNorm2d(c_out)]),
        Sequence([Conv2d(c_in, c_out, 1, groups=groups, bias=False, rng=rng), BatchNorm2d(c_out)]),
        Sequence([Conv2d(c_in, c_out, 1, groups=groups, bias=False, rng=rng), BatchNorm2d(c_out),
                  AvgPool(c_out, k, groups=pool_groups), BatchNorm2d(c_out)]),
        Sequence([Conv2d(c_in, c_in, 1, groups=groups, bias=False, rng=rng), BatchNorm2d(c_in),
                  Conv2d(c_in, c_out, k, groups=groups, bias=False, rng=rng), BatchNorm2d(c_out)]),
    ])


class RepConv(Module):
    """A k x k convolution whose training structure is a static conv, RepVGG or DBB graph."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, style: str = "static", groups: int = 1, rng=None):
        super().__init__()
        if style not in REP_STYLES:
            raise ValueError(f"unknown reparameterization style {style!r}; choose from {REP_STYLES}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.style = style
        self.k = k
        self.groups = groups
        self.c_in, self.c_out = c_in, c_out
        if style == "static":
            self.body = Conv2d(c_in, c_out, k, groups=groups, rng=rng)
        elif style == "repvgg":
            self.body = repvgg_graph(c_in, c_out, k, groups, rng)
        else:
            self.body = dbb_graph(c_in, c_out, k, groups, rng)

    @property
    def is_fused(self) -> bool:
        return isinstance(self.body, Conv2d)

    def forward(self, x) -> Var:
        return self.body(x)

    def bias_response(self) -> Var:
        """The constant this layer outputs for zero input (the fused bias in eval mode)."""
        if self.is_fused:
            return self.body.bias
        return self.body.respond_const(Var(np.zeros(self.c_in, self.body_dtype())))

    def body_dtype(self):
        return next(iter(self.body.named_parameters()))[1].dtype

    def fused_params(self) -> ConvParams:
        return fuse_branch_graph(self.body, self.k)

    def fuse(self) -> None:
        if not self.is_fused:
            self.body = Conv2d.from_params(self.fused_params())
