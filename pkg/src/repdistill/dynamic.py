"""Dynamic convolutions.

``DyConv`` mixes K expert kernels with softmax routing.  ``DynamicRepConv``
is the decomposed form used by the distillation blocks::

    out = lam(x) * (W_rep * x) + (P phi(x) Q^T) x + b_rep

where ``lam`` is a per-output-channel gate in (0, 2), ``phi`` an L x L latent
mixer and the P phi Q^T term a per-sample 1x1 kernel.  That last term is also
returned on its own as the dynamic residual.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Var
from .nn import Linear, Module, ModuleList, Parameter, init_uniform
from .reparam import RepConv
from .tensor import DimensionError

SQUEEZE_RATIO = 4


class Attention(NamedTuple):
    lam: Var  # (n, c_out)
    phi: Var | None  # (n, L, L)


def squeeze_width(c_in: int, ratio: int = SQUEEZE_RATIO) -> int:
    return max(c_in // ratio, 1)


class DynamicRepConv(Module):
    """Reparameterizable k x k convolution with a decomposed dynamic branch.

    ``latent=0`` builds no generators at all and behaves exactly like the
    underlying :class:`RepConv`.
    """

    def __init__(self, c_in: int, c_out: int, k: int = 3, latent: int = 0, style: str = "static",
                 groups: int = 1, rng=None, squeeze_ratio: int = SQUEEZE_RATIO):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if latent < 0:
            raise ValueError("latent width must be >= 0")
        if latent > max(c_in, c_out) // 2 and latent > 0:
            raise ValueError(f"latent width {latent} exceeds half the channel count ({max(c_in, c_out) // 2})")
        self.c_in, self.c_out, self.k, self.latent = c_in, c_out, k, latent
        self.static = RepConv(c_in, c_out, k, style, groups, rng)
        if latent:
            sq = squeeze_width(c_in, squeeze_ratio)
            self.P = Parameter(init_uniform(rng, (c_out, latent), latent))
            self.Q = Parameter(init_uniform(rng, (c_in, latent), c_in))
            self.squeeze = Linear(c_in, sq, rng)
            # zero heads: lam == 1 and phi == 0 until trained
            self.lam_head = Linear(sq, c_out, zero=True)
            self.phi_head = Linear(sq, latent * latent, zero=True)

    @property
    def has_dynamic(self) -> bool:
        return self.latent > 0

    def attention(self, x) -> Attention:
        x = ag.const(x)
        if x.shape[1] != self.c_in:
            raise DimensionError(f"channel axis: got {x.shape[1]}, expected {self.c_in}")
        n = x.shape[0]
        if not self.latent:
            return Attention(Var(np.ones((n, self.c_out), x.dtype)), None)
        pooled = ag.global_avg_pool(x).reshape(n, self.c_in)
        hidden = ag.relu(self.squeeze(pooled))
        lam = ag.sigmoid(self.lam_head(hidden)) * 2.0
        phi = self.phi_head(hidden).reshape(n, self.latent, self.latent)
        return Attention(lam, phi)

    def residual(self, x, phi: Var) -> Var:
        """The P phi Q^T term applied to ``x`` as a per-sample 1x1 convolution."""
        z = ag.einsum("cl,nchw->nlhw", self.Q, x)
        z = ag.einsum("nml,nlhw->nmhw", phi, z)
        return ag.einsum("dm,nmhw->ndhw", self.P, z)

    def forward(self, x, attention: Attention | None = None):
        """Returns ``(out, residual)``; ``residual`` is None when ``latent == 0``."""
        x = ag.const(x)
        if x.shape[1] != self.c_in:
            raise DimensionError(f"channel axis: got {x.shape[1]}, expected {self.c_in}")
        s = self.static(x)
        if not self.latent:
            return s, None
        att = attention if attention is not None else self.attention(x)
        b = self.static.bias_response().reshape(1, -1, 1, 1)
        lam = ag.const(att.lam, like=s).reshape(x.shape[0], self.c_out, 1, 1)
        r = self.residual(x, ag.const(att.phi, like=s))
        return lam * (s - b) + b + r, r


class DyConv(Module):
    """K-expert dynamic convolution with softmax routing on pooled features."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, experts: int = 4, style: str = "static",
                 groups: int = 1, rng=None):
        super().__init__()
        if experts < 1:
            raise ValueError("need at least one expert")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.experts = ModuleList([RepConv(c_in, c_out, k, style, groups, rng) for _ in range(experts)])
        self.router = Linear(c_in, experts, zero=True)

    has_dynamic = False

    def routing(self, x) -> Var:
        x = ag.const(x)
        pooled = ag.global_avg_pool(x).reshape(x.shape[0], self.c_in)
        return ag.channel_softmax(self.router(pooled))

    def forward(self, x, attention=None):
        x = ag.const(x)
        if x.shape[1] != self.c_in:
            raise DimensionError(f"channel axis: got {x.shape[1]}, expected {self.c_in}")
        pi = self.routing(x) if attention is None else ag.const(attention)
        n = x.shape[0]
        out = None
        for i, e in enumerate(self.experts):
            term = e(x) * pi[:, i].reshape(n, 1, 1, 1)
            out = term if out is None else out + term
        return out, None


# functional entry points over plain arrays


def dcd_attention(x, conv: DynamicRepConv) -> tuple[np.ndarray, np.ndarray]:
    with ag.no_grad():
        att = conv.attention(x)
    n = np.asarray(x).shape[0]
    phi = np.zeros((n, 0, 0), np.float32) if att.phi is None else att.phi.data
    return att.lam.data, phi


def dynamic_repconv_forward(x, conv: DynamicRepConv) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x)
    with ag.no_grad():
        out, r = conv(x)
    if r is None:
        return out.data, np.zeros((x.shape[0], conv.c_out) + out.shape[2:], out.dtype)
    return out.data, r.data


def dyconv_forward(x, conv: DyConv) -> np.ndarray:
    with ag.no_grad():
        return conv(x)[0].data
