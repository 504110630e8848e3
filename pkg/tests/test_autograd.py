import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from repdistill import autograd as ag
from repdistill.autograd import ContractError, Var


def param(a):
    return Var(np.asarray(a, np.float64), requires_grad=True)


def test_sum_gives_ones(rng):
    x = param(rng.normal(size=(2, 3, 4, 4)))
    g = ag.backward(x.sum(), {"x": x})["x"]
    np.testing.assert_array_equal(g, np.ones_like(x.data))


def test_l1_at_equality_has_zero_gradient(rng):
    x = param(rng.normal(size=(1, 2, 3, 3)))
    g = ag.backward(ag.l1_loss(x, x.data.copy()), [x])[x]
    assert not g.any()


def test_non_scalar_loss_is_contract_error(rng):
    x = param(rng.normal(size=(3,)))
    with pytest.raises(ContractError):
        ag.backward(x * 2.0)


def test_unreached_parameter_gets_zeros(rng):
    x, y = param(rng.normal(size=4)), param(rng.normal(size=(2, 2)))
    grads = ag.backward((x * x).sum(), {"x": x, "y": y})
    assert grads["y"].shape == (2, 2) and not grads["y"].any()
    np.testing.assert_allclose(grads["x"], 2 * x.data)


def test_conv_loss_matches_finite_differences(rng):
    # loss = sum(conv2d(x, w)^2) / 2 with h = 1e-3
    x = rng.normal(size=(2, 3, 6, 6))
    w = param(rng.normal(size=(4, 3, 3, 3)))
    b = param(rng.normal(size=4))

    def loss():
        out = ag.conv2d(x, w, b, 1, 1)
        return (out * out).sum() * 0.5

    assert ag.grad_check(loss, {"w": w, "b": b}, h=1e-3, max_checks=20) <= 1e-4


def test_linear_map_is_exact(rng):
    a = param(rng.normal(size=(3, 5)))
    x = rng.normal(size=(4, 3))
    c = rng.normal(size=(4, 5))
    err = ag.grad_check(lambda: (ag.matmul(x, a) * c).sum(), {"a": a}, h=1e-3, max_checks=15)
    assert err <= 1e-8


def test_gradient_accumulates_over_reuse(rng):
    x = param(rng.normal(size=3))
    g = ag.backward((x * x + x * 3.0).sum(), [x])[x]
    np.testing.assert_allclose(g, 2 * x.data + 3.0)


def test_no_grad_records_nothing(rng):
    x = param(rng.normal(size=3))
    with ag.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


@pytest.mark.parametrize("name,fn", [
    ("sigmoid", ag.sigmoid),
    ("leaky_relu", lambda v: ag.leaky_relu(v, 0.05)),
    ("exp", ag.exp),
    ("square", ag.square),
    ("sqrt_pos", lambda v: ag.sqrt(ag.square(v) + 1.0)),
    ("reciprocal", lambda v: ag.reciprocal(ag.square(v) + 1.0)),
    ("softmax", ag.channel_softmax),
    ("gap", ag.global_avg_pool),
    ("pixel_shuffle", lambda v: ag.pixel_shuffle(v, 2)),
    ("bilinear", lambda v: ag.bilinear_resize(v, 7, 5)),
    ("maxpool", lambda v: ag.max_pool2d(v, 3, 2)),
    ("transpose", lambda v: ag.transpose(v, (0, 2, 3, 1))),
    ("slice", lambda v: v[:, 1:3, ::2]),
    ("mean", lambda v: ag.mean(v, axis=(0, 2))),
    ("abs", ag.abs_),
])
def test_elementwise_and_shape_ops(rng, name, fn):
    x = rng.normal(size=(2, 4, 6, 6))
    x = np.where(np.abs(x) < 1e-2, 0.5, x)  # stay away from kinks
    v = param(x)
    w = None

    def loss():
        nonlocal w
        out = fn(v)
        if w is None:
            w = np.random.default_rng(0).normal(size=out.shape)
        return (out * w).sum()

    assert ag.grad_check(loss, {"x": v}, h=1e-6, max_checks=20) <= 1e-4, name


def test_concat_einsum_pad_const(rng):
    a, b = param(rng.normal(size=(1, 2, 3, 3))), param(rng.normal(size=(1, 3, 3, 3)))
    m = param(rng.normal(size=(5, 4)))
    pv = param(rng.normal(size=4))
    w = rng.normal(size=(1, 3, 5, 5))

    def loss():
        cat = ag.concat([a, b], axis=1)
        mixed = ag.einsum("nchw,cd->ndhw", cat, m)
        return (ag.pad_const(mixed, 1, pv)[:, :3] * w).sum()

    assert ag.grad_check(loss, {"a": a, "b": b, "m": m, "pv": pv}, h=1e-6) <= 1e-6


def test_einsum_rejects_single_operand_reductions():
    with pytest.raises(ContractError):
        ag.einsum("ii,j->j", np.eye(2), np.ones(2))


def test_grouped_strided_conv_gradients(rng):
    x = param(rng.normal(size=(2, 4, 7, 7)))
    w = param(rng.normal(size=(6, 2, 3, 3)))
    c = rng.normal(size=(2, 6, 4, 4))
    err = ag.grad_check(lambda: (ag.conv2d(x, w, None, 2, 1, groups=2) * c).sum(), {"x": x, "w": w}, h=1e-6)
    assert err <= 1e-5


@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
@settings(max_examples=25, deadline=None)
def test_broadcast_gradients_reduce_to_operand_shape(a):
    x = param(a)
    y = param(np.arange(4.0))
    grads = ag.backward(((x + y) * y).sum(), {"x": x, "y": y})
    assert grads["x"].shape == (3, 4) and grads["y"].shape == (4,)
    np.testing.assert_allclose(grads["y"], (a + 2 * np.arange(4.0)).sum(axis=0), atol=1e-9)
