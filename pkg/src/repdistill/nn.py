"""Small module system: parameters, buffers, and the basic layers."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Var
from .tensor import ConvParams, DimensionError, conv_output_size

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Parameter(Var):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        arr = np.array(data)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        super().__init__(arr, requires_grad=True, name=name)


class Module:
    """Base class.  Parameters, buffers and submodules are discovered by attribute order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if name in self._buffers:
            object.__setattr__(self, name, value)
            return
        for store in (self._params, self._buffers, self._modules):
            store.pop(name, None)
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = None
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        yield from self._modules.items()

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, m in self._modules.items():
            yield from m.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield (f"{prefix}.{name}" if prefix else name), p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}.{name}" if prefix else name)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield (f"{prefix}.{name}" if prefix else name), getattr(self, name)
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((n, p.data) for n, p in self.named_parameters())
        out.update(self.named_buffers())
        return out

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for _, m in self.named_modules():
            for p in m._params.values():
                p.data = p.data.astype(dtype)
            for b in m._buffers:
                object.__setattr__(m, b, getattr(m, b).astype(dtype))
        return self


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._modules)), m)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return list(self._modules.values())[i]


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, padding: int | None = None,
                 groups: int = 1, bias: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        if in_ch % groups or out_ch % groups:
            raise DimensionError(f"channels {in_ch}->{out_ch} not divisible by groups={groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch // groups * k * k
        self.weight = Parameter(init_uniform(rng, (out_ch, in_ch // groups, k, k), fan_in))
        self.bias = Parameter(init_uniform(rng, (out_ch,), fan_in)) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups

    @classmethod
    def from_params(cls, p: ConvParams) -> "Conv2d":
        m = cls(p.in_channels, p.out_channels, p.k, p.stride, p.padding, p.groups)
        m.weight = Parameter(p.weight)
        m.bias = Parameter(p.bias)
        return m

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def forward(self, x) -> Var:
        return ag.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def to_params(self) -> ConvParams:
        b = self.bias.data if self.bias is not None else np.zeros(self.out_channels, self.weight.dtype)
        return ConvParams(self.weight.data.copy(), b.copy(), self.stride, self.padding, self.groups)

    def madds(self, h: int, w: int) -> tuple[int, int, int]:
        """Multiply-accumulates for an (h, w) input; also returns the output size."""
        ho = conv_output_size(h, self.k, self.stride, self.padding)
        wo = conv_output_size(w, self.k, self.stride, self.padding)
        return self.k * self.k * self.in_channels // self.groups * self.out_channels * ho * wo, ho, wo


class Linear(Module):
    """Fully connected layer over (n, in) inputs."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, zero: bool = False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if zero:
            self.weight = Parameter(np.zeros((n_in, n_out), np.float32))
            self.bias = Parameter(np.zeros(n_out, np.float32))
        else:
            self.weight = Parameter(init_uniform(rng, (n_in, n_out), n_in))
            self.bias = Parameter(init_uniform(rng, (n_out,), n_in))

    def forward(self, x: Var) -> Var:
        return ag.matmul(x, self.weight) + self.bias


class BatchNorm2d(Module):
    """Per-channel batch norm; batch statistics in training, running averages in eval."""

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.weight = Parameter(np.ones(channels, np.float32))
        self.bias = Parameter(np.zeros(channels, np.float32))
        self.register_buffer("running_mean", np.zeros(channels, np.float32))
        self.register_buffer("running_var", np.ones(channels, np.float32))
        self.eps = eps
        self.momentum = momentum
        self._last_affine = None

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    def affine(self, x: Var | None = None) -> tuple[Var, Var]:
        """(scale, shift) per channel such that bn(v) = scale * v + shift.

        With ``x`` in training mode the batch statistics of ``x`` are used and
        the running averages updated.
        """
        if self.training and x is not None:
            mu = ag.mean(x, axis=(0, 2, 3))
            var = ag.mean(ag.square(x - mu.reshape(1, -1, 1, 1)), axis=(0, 2, 3))
            count = x.shape[0] * x.shape[2] * x.shape[3]
            m = self.momentum
            unbiased = var.data * (count / max(count - 1, 1))
            self.running_mean = ((1 - m) * self.running_mean + m * mu.data).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
        else:
            mu = Var(self.running_mean)
            var = Var(self.running_var)
        scale = self.weight / ag.sqrt(var + self.eps)
        shift = self.bias - mu * scale
        self._last_affine = (scale, shift)
        return scale, shift

    def forward(self, x: Var) -> Var:
        x = ag.const(x)
        scale, shift = self.affine(x)
        return x * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)

    def eval_affine(self) -> tuple[np.ndarray, np.ndarray]:
        std = np.sqrt(self.running_var.astype(np.float64) + self.eps)
        scale = self.weight.data / std
        return scale, self.bias.data - self.running_mean * scale
