"""Adam, cosine schedule and a small deterministic training loop."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .degrade import augment_patch
from .network import DistillSRNet, fuse_model

LR_MAX = 5e-4
LR_MIN = 1e-7
BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingError(ArithmeticError):
    """Non-finite gradient or loss."""


def cosine_lr(t: int, period: int, lr_max: float = LR_MAX, lr_min: float = LR_MIN) -> float:
    if period <= 0:
        raise ValueError("period must be positive")
    if t < 0:
        raise ValueError("step must be non-negative")
    if t and t % period == 0:
        return lr_min  # end of a period; the next step restarts at lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * (t % period) / period))


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    betas: tuple = BETAS
    eps: float = ADAM_EPS


def adam_step(params: dict, grads: dict, state: OptimState, lr: float) -> None:
    """In-place bias-corrected Adam update of ``params`` (name -> Var)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    b1, b2 = state.betas
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


@dataclass
class TraceRow:
    stage: str
    step: int
    lr: float
    loss: float


def trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "step", "lr", "loss"])
    for r in trace:
        w.writerow([r.stage, r.step, f"{r.lr:.6e}", f"{r.loss:.8f}"])
    return buf.getvalue()


def _batch(pairs, idx, rng, augment: bool):
    lrs, hrs = [], []
    for i in idx:
        lp, hp = pairs[i]
        if augment:
            rot, flip = int(rng.integers(0, 4)), bool(rng.integers(0, 2))
            lp, hp = augment_patch(lp, rot, flip), augment_patch(hp, rot, flip)
        lrs.append(lp)
        hrs.append(hp)
    return np.concatenate(lrs), np.concatenate(hrs)


def fit(model, pairs, steps: int, seed: int = 0, loss: str = "l1", lr_max: float = LR_MAX,
        lr_min: float = LR_MIN, batch_size: int = 1, augment: bool = False, stage: str = "l1",
        on_step=None) -> list[TraceRow]:
    """Optimize ``model`` on (lr, hr) patch pairs; returns the per-step trace."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps and not pairs:
        raise ValueError("no training pairs")
    loss_fn = {"l1": ag.l1_loss, "l2": ag.l2_loss}[loss]
    rng = np.random.default_rng(seed)
    params = dict(model.named_parameters())
    state = OptimState()
    trace = []
    model.train()
    for t in range(steps):
        idx = rng.integers(0, len(pairs), size=batch_size)
        x, y = _batch(pairs, idx, rng, augment)
        value = loss_fn(model(x), y)
        if not np.isfinite(value.data):
            raise TrainingError(f"loss diverged at step {t}")
        grads = ag.backward(value, params)
        lr = cosine_lr(t, steps, lr_max, lr_min)
        adam_step(params, grads, state, lr)
        row = TraceRow(stage, t, lr, float(value.data))
        trace.append(row)
        if on_step is not None:
            on_step(row)
    return trace


def train_toy(model: DistillSRNet, pairs, steps: int, seed: int = 0, finetune_steps: int = 0,
              **kw) -> tuple[DistillSRNet, list[TraceRow]]:
    """L1 training, then optional L2 fine-tuning of the fused model.

    Returns the final model (fused when fine-tuning ran) and the combined trace.
    """
    trace = fit(model, pairs, steps, seed, "l1", stage="l1", **kw)
    if finetune_steps:
        model = fuse_model(model)
        kw.setdefault("lr_max", LR_MAX / 10)
        trace += fit(model, pairs, finetune_steps, seed + 1, "l2", stage="l2", **kw)
    model.eval()
    return model, trace
