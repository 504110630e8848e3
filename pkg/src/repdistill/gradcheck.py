"""Finite-difference gradient checks over every block type, in float64."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Var
from .blocks import ESA, RDU, RDU_ARCHS, ChannelFusion, DynamicFusion, RduConfig
from .dynamic import DynamicRepConv
from .network import ModelConfig, build_model

TOLERANCE = 1e-3


def _randomize_generators(module, rng) -> None:
    # zero-initialized heads would leave the attention path untested
    for _, m in module.named_modules():
        if isinstance(m, DynamicRepConv) and m.latent:
            for head in (m.lam_head, m.phi_head):
                head.weight.data = rng.normal(0, 0.3, head.weight.shape)
                head.bias.data = rng.normal(0, 0.1, head.bias.shape)


def _check(module, make_loss, rng, max_checks: int, h: float = 1e-5) -> float:
    module.astype(np.float64)
    _randomize_generators(module, rng)
    params = dict(module.named_parameters())
    return ag.grad_check(make_loss, params, h=h, max_checks=max_checks, seed=int(rng.integers(1 << 30)))


def _weighted_sum(out: Var, w: np.ndarray) -> Var:
    # a mean keeps the loss O(1) so finite-difference noise on exactly-zero
    # gradients (e.g. a shift followed by batch norm) stays below the 1e-8 floor
    return (out * w).mean()


def suite(seed: int = 0, channels: int = 8, size: int = 16, max_checks: int = 6,
          style: str = "dbb") -> list[tuple[str, float]]:
    """Run all checks; returns ``(name, worst relative error)`` pairs."""
    rng = np.random.default_rng(seed)
    c, n = channels, 2
    x = rng.normal(0, 1, (n, c, size, size))
    results = []

    conv = DynamicRepConv(c, c, 3, latent=c // 4 or 1, style=style, rng=rng)
    w_out = rng.normal(0, 1, (n, c, size, size))
    results.append(("dynamic_repconv", _check(
        conv, lambda: _weighted_sum(conv(x)[0], w_out) + _weighted_sum(conv(x)[1], w_out * 0.5),
        rng, max_checks)))

    for arch in RDU_ARCHS:
        rdu = RDU(RduConfig(arch, c, c // 4 or 1, style, "dcd"), rng)

        def loss(rdu=rdu):
            out = rdu(x)
            return _weighted_sum(out.static, w_out) + _weighted_sum(out.dynamic, w_out[:, ::-1].copy())

        results.append((f"rdu_{arch}", _check(rdu, loss, rng, max_checks)))

    distilled = [rng.normal(0, 1, (n, c // 2, size, size)) for _ in range(4)]
    sdf = ChannelFusion(4, c // 2, c, rng)
    results.append(("sdf", _check(sdf, lambda: _weighted_sum(sdf(distilled), w_out), rng, max_checks)))

    dynamics = [rng.normal(0, 1, (n, c, size, size)) for _ in range(4)]
    ddf = DynamicFusion(4, c, rng)
    results.append(("ddf", _check(ddf, lambda: _weighted_sum(ddf(dynamics, x), w_out), rng, max_checks)))

    esa = ESA(c, rng)
    results.append(("esa", _check(esa, lambda: _weighted_sum(esa(x), w_out), rng, max_checks)))

    cfg = ModelConfig(scale=2, channels=c, blocks=1, latent=c // 4 or 1, rep_style=style)
    model = build_model(cfg, seed=seed)
    lr = rng.uniform(0, 1, (1, 3, size, size))
    w_sr = rng.normal(0, 1, (1, 3, 2 * size, 2 * size))
    results.append(("model", _check(model, lambda: _weighted_sum(model(lr), w_sr), rng, max_checks)))
    return results
