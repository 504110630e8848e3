"""Full super-resolution network: configuration, assembly, inference and fusion."""
from __future__ import annotations

import copy
import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .blocks import RDU, DynamicFusion, RduConfig, RepDFDB, RepDfdbConfig
from .nn import Conv2d, Module, ModuleList
from .reparam import RepConv
from .tensor import DEFAULT_SLOPE, DimensionError

SCALES = (2, 3, 4)
VARIANTS = ("full", "s")
# per-variant defaults for fields left as None
VARIANT_PRESETS = {
    "full": {"arch": "base", "latent": 16, "ddf": True},
    "s": {"arch": "scb", "latent": 8, "ddf": False},
}


class ConfigError(ValueError):
    pass


class AlreadyFusedWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ModelConfig:
    scale: int = 4
    channels: int = 56
    blocks: int = 4
    variant: str = "full"
    latent: int | None = None
    arch: str | None = None
    ddf: bool | None = None
    rep_style: str = "dbb"
    conv_type: str = "dcd"
    distill_channels: int | None = None
    experts: int = 4
    slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale}")
        if self.blocks < 1 or self.channels < 4:
            raise ConfigError("need blocks >= 1 and channels >= 4")
        for key, value in VARIANT_PRESETS[self.variant].items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)
        try:
            self.rdu_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.latent > self.channels // 2:
            raise ConfigError(f"latent {self.latent} exceeds channels/2 = {self.channels // 2}")

    def rdu_config(self) -> RduConfig:
        return RduConfig(self.arch, self.channels, self.latent, self.rep_style, self.conv_type,
                         self.experts, self.slope)

    def block_config(self) -> RepDfdbConfig:
        return RepDfdbConfig(self.rdu_config(), self.distill_channels, self.ddf)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


class DistillSRNet(Module):
    """Feature extraction, B distillation blocks, global fusion and sub-pixel upscaling.

    Global fusion mirrors the block-level fusions: a 1x1 conv over the
    concatenated block outputs, an optional gated fusion of the block-level
    dynamic features, then an RDU and a long skip from the extracted features.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        c, s = cfg.channels, cfg.scale
        self.cfg = cfg
        self.fused = False
        bcfg = cfg.block_config()
        self.head = Conv2d(3, c, 3, rng=rng)
        self.blocks = ModuleList([RepDFDB(bcfg, rng) for _ in range(cfg.blocks)])
        self.global_sdf = Conv2d(cfg.blocks * c, c, 1, rng=rng)
        self.global_ddf = DynamicFusion(cfg.blocks, c, rng) if bcfg.uses_ddf else None
        self.global_rdu = RDU(bcfg.rdu, rng, emit_dynamic=False)
        self.upsample = Conv2d(c, 3 * s * s, 3, rng=rng)
        self.tail = Conv2d(3, 3, 3, rng=rng)

    def features(self, x):
        """Block-level outputs ``(f0, statics, dynamics)`` for an LR batch."""
        f0 = self.head(x)
        statics, dynamics = [], []
        cur = f0
        for blk in self.blocks:
            cur, dyn = blk(cur)
            statics.append(cur)
            dynamics.append(dyn)
        return f0, statics, dynamics

    def forward(self, x):
        x = ag.const(x)
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected an n x 3 x h x w batch, got shape {x.shape}")
        f0, statics, dynamics = self.features(x)
        g = self.global_sdf(ag.concat(statics, axis=1))
        if self.global_ddf is not None:
            g = g + self.global_ddf(dynamics, g)
        g = self.global_rdu(g).static + f0
        return self.tail(ag.pixel_shuffle(self.upsample(g), self.cfg.scale))


def build_model(cfg: ModelConfig, seed: int = 0) -> DistillSRNet:
    return DistillSRNet(cfg, seed)


def rep_convs(model: Module):
    return [(name, m) for name, m in model.named_modules() if isinstance(m, RepConv)]


def fuse_model(model: DistillSRNet) -> DistillSRNet:
    """Copy of ``model`` with every reparameterizable conv collapsed to one kernel.

    Batch norms are folded with their running statistics, so the result is
    in eval mode.  Fusing a fused model warns and returns it unchanged.
    """
    if getattr(model, "fused", False):
        warnings.warn("model is already fused", AlreadyFusedWarning, stacklevel=2)
        return model
    out = copy.deepcopy(model).eval()
    for _, m in rep_convs(out):
        m.fuse()
    out.fused = True
    return out


def super_resolve(model: Module, lr) -> np.ndarray:
    """Run inference on an n x 3 x h x w batch in [0, 1]; the output is not clamped."""
    lr = np.asarray(lr, dtype=np.float32)
    if lr.ndim == 3:
        lr = lr[None]
    if lr.ndim != 4 or lr.shape[1] != 3:
        raise DimensionError(f"expected an n x 3 x h x w batch, got shape {lr.shape}")
    was_training = model.training
    model.eval()
    try:
        with ag.no_grad():
            return model(lr).data
    finally:
        model.train(was_training)
