"""Reparameterized dynamic units and the distillation block built from them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Var
from .dynamic import DyConv, DynamicRepConv
from .nn import Conv2d, Module, ModuleList
from .reparam import REP_STYLES
from .tensor import DEFAULT_SLOPE, DimensionError

RDU_ARCHS = ("base", "srb", "scb", "rb")
CONV_TYPES = ("static", "dyconv", "dcd")
DISTILL_STEPS = 4


@dataclass(frozen=True)
class RduConfig:
    arch: str = "base"
    channels: int = 56
    latent: int = 16
    rep_style: str = "dbb"
    conv_type: str = "dcd"
    experts: int = 4
    slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        if self.arch not in RDU_ARCHS:
            raise ValueError(f"unknown RDU arch {self.arch!r}; choose from {RDU_ARCHS}")
        if self.rep_style not in REP_STYLES:
            raise ValueError(f"unknown rep style {self.rep_style!r}; choose from {REP_STYLES}")
        if self.conv_type not in CONV_TYPES:
            raise ValueError(f"unknown conv type {self.conv_type!r}; choose from {CONV_TYPES}")
        if self.channels < 1:
            raise ValueError("channels must be positive")

    @property
    def dynamic(self) -> bool:
        """True when the unit's convolutions emit a dynamic residual."""
        return self.conv_type == "dcd" and self.latent > 0


class RduOutput(NamedTuple):
    static: Var
    dynamic: Var | None


def make_conv(cfg: RduConfig, c_in: int, c_out: int, k: int = 3, groups: int = 1, rng=None):
    if cfg.conv_type == "dyconv":
        return DyConv(c_in, c_out, k, cfg.experts, cfg.rep_style, groups, rng)
    latent = cfg.latent if cfg.conv_type == "dcd" else 0
    return DynamicRepConv(c_in, c_out, k, latent, cfg.rep_style, groups, rng)


def shallow_fusion(residuals, conv: Conv2d) -> Var:
    """Merge dynamic residuals with one 1x1 conv; a single residual skips the concat."""
    residuals = list(residuals)
    if not residuals:
        raise ContractError("shallow_fusion needs at least one residual")
    x = residuals[0] if len(residuals) == 1 else ag.concat(residuals, axis=1)
    return conv(x)


class RDU(Module):
    """Reparameterized dynamic unit.

    ``emit_dynamic=False`` skips building the residual fusion conv, for
    units whose dynamic output nobody consumes.
    """

    def __init__(self, cfg: RduConfig, rng=None, emit_dynamic: bool = True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        c = cfg.channels
        self.cfg = cfg
        if cfg.arch == "scb":
            self.conv1 = make_conv(cfg, c, c, 3, groups=c, rng=rng)
            self.pointwise = Conv2d(c, c, 1, rng=rng)
        else:
            self.conv1 = make_conv(cfg, c, c, 3, rng=rng)
        if cfg.arch == "rb":
            self.conv2 = make_conv(cfg, c, c, 3, rng=rng)
        self.n_residuals = (2 if cfg.arch == "rb" else 1) if cfg.dynamic else 0
        self.fusion = Conv2d(self.n_residuals * c, c, 1, rng=rng) if emit_dynamic and self.n_residuals else None

    def forward(self, x) -> RduOutput:
        x = ag.const(x)
        c = self.cfg.channels
        if x.shape[1] != c:
            raise DimensionError(f"channel axis: got {x.shape[1]}, expected {c}")
        act = lambda v: ag.leaky_relu(v, self.cfg.slope)  # noqa: E731
        h, r1 = self.conv1(x)
        residuals = [r1]
        arch = self.cfg.arch
        if arch == "base":
            out = act(h)
        elif arch == "srb":
            out = act(h) + x
        elif arch == "scb":
            out = act(self.pointwise(h))
        else:
            h2, r2 = self.conv2(act(h))
            residuals.append(r2)
            out = h2 + x
        dyn = None
        if self.fusion is not None:
            dyn = shallow_fusion([r for r in residuals if r is not None], self.fusion)
        return RduOutput(out, dyn)


class ChannelFusion(Module):
    """Concatenate a fixed number of equally sized inputs and mix them with a 1x1 conv."""

    def __init__(self, n_inputs: int, c_each: int, c_out: int, rng=None):
        super().__init__()
        self.n_inputs = n_inputs
        self.c_each = c_each
        self.conv = Conv2d(n_inputs * c_each, c_out, 1, rng=rng)

    def forward(self, inputs) -> Var:
        inputs = list(inputs)
        if len(inputs) != self.n_inputs:
            raise ContractError(f"expected {self.n_inputs} inputs, got {len(inputs)}")
        for i, t in enumerate(inputs):
            if t.shape[1] != self.c_each:
                raise DimensionError(f"input {i} channel axis: got {t.shape[1]}, expected {self.c_each}")
        return self.conv(ag.concat(inputs, axis=1))


class DynamicFusion(Module):
    """Pixel-attention gated fusion: sigmoid(pa(guide)) * fuse(concat(dynamics))."""

    def __init__(self, n_inputs: int, c: int, rng=None):
        super().__init__()
        self.fuse = ChannelFusion(n_inputs, c, c, rng)
        self.pa = Conv2d(c, c, 1, rng=rng)

    def forward(self, dynamics, guide) -> Var:
        return ag.sigmoid(self.pa(guide)) * self.fuse(dynamics)


# stride-2 3x3 conv must leave at least 7 pixels for the 7x7 max pool
ESA_MIN_SIZE = 15


class ESA(Module):
    """Enhanced spatial attention: a coarse spatial gate computed at reduced resolution."""

    def __init__(self, c: int, rng=None):
        super().__init__()
        if c < 4:
            raise DimensionError(f"ESA needs at least 4 channels, got {c}")
        f = c // 4
        self.reduce = Conv2d(c, f, 1, rng=rng)
        self.down = Conv2d(f, f, 3, stride=2, padding=0, rng=rng)
        self.mid = Conv2d(f, f, 3, rng=rng)
        self.skip = Conv2d(f, f, 1, rng=rng)
        self.expand = Conv2d(f, c, 1, rng=rng)

    def gate(self, x) -> Var:
        x = ag.const(x)
        h, w = x.shape[2:]
        if min(h, w) < ESA_MIN_SIZE:
            raise DimensionError(f"spatial size {h}x{w} too small for ESA; need at least "
                                 f"{ESA_MIN_SIZE}x{ESA_MIN_SIZE}")
        r = self.reduce(x)
        d = ag.max_pool2d(self.down(r), 7, 3)
        d = ag.bilinear_resize(self.mid(d), h, w)
        return ag.sigmoid(self.expand(d + self.skip(r)))

    def forward(self, x) -> Var:
        x = ag.const(x)
        return x * self.gate(x)


@dataclass(frozen=True)
class RepDfdbConfig:
    rdu: RduConfig
    distill_channels: int | None = None
    ddf: bool = True

    @property
    def channels(self) -> int:
        return self.rdu.channels

    @property
    def c_d(self) -> int:
        return self.distill_channels if self.distill_channels is not None else max(self.channels // 2, 1)

    @property
    def uses_ddf(self) -> bool:
        return self.ddf and self.rdu.dynamic


class RepDFDB(Module):
    """Distillation block: three RDU steps, four 1x1 distillations, static and dynamic fusion, ESA."""

    def __init__(self, cfg: RepDfdbConfig, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        c, cd = cfg.channels, cfg.c_d
        if cd < 1:
            raise ValueError("distilled width must be >= 1")
        self.cfg = cfg
        self.rdus = ModuleList([RDU(cfg.rdu, rng, emit_dynamic=cfg.uses_ddf) for _ in range(DISTILL_STEPS - 1)])
        self.distill = ModuleList([Conv2d(c, cd, 1, rng=rng) for _ in range(DISTILL_STEPS)])
        self.sdf = ChannelFusion(DISTILL_STEPS, cd, c, rng)
        self.ddf = DynamicFusion(DISTILL_STEPS, c, rng) if cfg.uses_ddf else None
        self.esa = ESA(c, rng)

    def steps(self, f_in):
        """Run the distillation chain; returns (distilled, dynamics, statics)."""
        f_in = ag.const(f_in)
        if f_in.shape[1] != self.cfg.channels:
            raise DimensionError(f"channel axis: got {f_in.shape[1]}, expected {self.cfg.channels}")
        distilled, dynamics, statics = [], [], []
        cur = f_in
        for rdu, h in zip(self.rdus, self.distill):
            distilled.append(h(cur))
            out = rdu(cur)
            statics.append(out.static)
            dynamics.append(out.dynamic)
            cur = out.static
        distilled.append(self.distill[-1](cur))
        dynamics.append(f_in)
        return distilled, dynamics, statics

    def forward(self, f_in):
        """Returns ``(F, F_ddf)``; ``F_ddf`` is None when dynamic fusion is off."""
        f_in = ag.const(f_in)
        distilled, dynamics, _ = self.steps(f_in)
        f_sdf = self.sdf(distilled)
        f_ddf = self.ddf(dynamics, f_sdf) if self.ddf is not None else None
        fused = f_sdf if f_ddf is None else f_sdf + f_ddf
        return self.esa(fused) + f_in, f_ddf


# functional entry points over plain arrays


def rdu_forward(x, rdu: RDU) -> tuple[np.ndarray, np.ndarray]:
    with ag.no_grad():
        out = rdu(x)
    dyn = out.dynamic.data if out.dynamic is not None else np.zeros_like(out.static.data)
    return out.static.data, dyn


def repdfdb_forward(f_in, block: RepDFDB) -> tuple[np.ndarray, np.ndarray]:
    with ag.no_grad():
        f, f_ddf = block(f_in)
    return f.data, (f_ddf.data if f_ddf is not None else np.zeros_like(f.data))
