import math

import numpy as np
import pytest

from repdistill.nn import Parameter
from repdistill.network import ModelConfig, build_model
from repdistill.train import (
    LR_MAX, LR_MIN, OptimState, TrainingError, adam_step, cosine_lr, fit, trace_csv, train_toy,
)


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100) == LR_MAX
    assert cosine_lr(100, 100) == pytest.approx(LR_MIN, abs=1e-15)
    assert cosine_lr(50, 100) == pytest.approx((LR_MAX + LR_MIN) / 2)
    vals = [cosine_lr(t, 40) for t in range(41)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        cosine_lr(0, 0)


def _param(values):
    return Parameter(np.array(values, np.float32))


def test_adam_zero_gradient_is_noop():
    p = _param([1.0, -2.0])
    adam_step({"w": p}, {"w": np.zeros(2)}, OptimState(), 1e-3)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = _param([1.0, 1.0, 1.0])
    adam_step({"w": p}, {"w": np.array([3.0, -0.5, 1e-3])}, OptimState(), 0.01)
    np.testing.assert_allclose(p.data, [0.99, 1.01, 0.99], atol=1e-5)


def test_adam_zero_lr_is_identity():
    p = _param([0.5, 0.25])
    st = OptimState()
    for _ in range(3):
        adam_step({"w": p}, {"w": np.array([1.0, -1.0])}, st, 0.0)
    np.testing.assert_array_equal(p.data, [0.5, 0.25])


def test_adam_rejects_non_finite_gradient():
    p = _param([1.0])
    with pytest.raises(TrainingError, match="blocks.0.weight"):
        adam_step({"blocks.0.weight": p}, {"blocks.0.weight": np.array([math.nan])}, OptimState(), 1e-3)
    np.testing.assert_array_equal(p.data, [1.0])


def _pairs(rng, n=2, scale=2, size=16):
    return [(rng.uniform(size=(1, 3, size, size)).astype(np.float32),
             rng.uniform(size=(1, 3, size * scale, size * scale)).astype(np.float32)) for _ in range(n)]


def _model(seed=0):
    return build_model(ModelConfig(scale=2, channels=8, blocks=1, latent=2), seed=seed)


def test_zero_steps_leave_model_untouched(rng):
    m = _model()
    before = [p.data.copy() for p in m.parameters()]
    model, trace = train_toy(m, _pairs(rng), 0)
    assert trace == [] and trace_csv(trace) == "stage,step,lr,loss\n"
    for a, p in zip(before, model.parameters()):
        np.testing.assert_array_equal(a, p.data)


def test_same_seed_same_trace(rng):
    pairs = _pairs(rng)
    _, t1 = train_toy(_model(), pairs, 4, seed=3)
    _, t2 = train_toy(_model(), pairs, 4, seed=3)
    assert trace_csv(t1) == trace_csv(t2)
    _, t3 = train_toy(_model(), pairs, 4, seed=4)
    assert trace_csv(t1) != trace_csv(t3)


def test_finetune_runs_on_fused_model(rng):
    model, trace = train_toy(_model(), _pairs(rng), 2, finetune_steps=2)
    assert model.fused and not model.training
    assert [r.stage for r in trace] == ["l1", "l1", "l2", "l2"]
    assert trace[2].lr == pytest.approx(LR_MAX / 10)


def test_loss_decreases_on_single_pair(rng):
    pairs = _pairs(rng, n=1)
    trace = fit(_model(), pairs, 30, lr_max=2e-3)
    assert np.mean([r.loss for r in trace[-5:]]) < np.mean([r.loss for r in trace[:5]])


def test_fit_argument_checks(rng):
    with pytest.raises(ValueError):
        fit(_model(), _pairs(rng), -1)
    with pytest.raises(ValueError):
        fit(_model(), [], 3)
