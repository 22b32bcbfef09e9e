import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qlora_cls.tensor import (
    OPS,
    DomainError,
    ShapeError,
    Tensor,
    apply,
    backward,
    causal_attention,
    finite_diff_check,
    log,
    matmul,
    mul,
    no_grad,
    sigmoid,
    softmax,
    sum_,
)


def leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x.astype(np.float64), requires_grad=True)


def op_cases(rng):
    ids = rng.integers(0, 6, size=(2, 3))
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]])
    return {
        "matmul": ([leaf(rng, 3, 4), leaf(rng, 4, 2)], {}),
        "add": ([leaf(rng, 3, 4), leaf(rng, 4)], {}),
        "multiply": ([leaf(rng, 3, 4), leaf(rng, 3, 1)], {}),
        "embedding": ([leaf(rng, 6, 4)], {"ids": ids}),
        "softmax": ([leaf(rng, 3, 5)], {}),
        "log_softmax": ([leaf(rng, 3, 5)], {}),
        "sigmoid": ([leaf(rng, 3, 5)], {}),
        "log_sigmoid": ([leaf(rng, 3, 5)], {}),
        "rms_norm": ([leaf(rng, 2, 3, 6), leaf(rng, 6)], {}),
        "gelu": ([leaf(rng, 4, 5)], {}),
        "attention": ([leaf(rng, 2, 2, 4, 3), leaf(rng, 2, 2, 4, 3), leaf(rng, 2, 2, 4, 3)], {"key_mask": mask}),
        "dropout": ([leaf(rng, 4, 5)], {"p": 0.3, "rng": None, "training": False}),
        "row_select": ([leaf(rng, 3, 4, 2)], {"index": np.array([0, 3, 1])}),
        "concat": ([leaf(rng, 2, 3), leaf(rng, 1, 3)], {"axis": 0}),
        "log": ([leaf(rng, 3, 4, positive=True)], {}),
        "exp": ([leaf(rng, 3, 4)], {}),
        "sum": ([leaf(rng, 3, 4)], {"axis": 1}),
        "reshape": ([leaf(rng, 3, 4)], {"shape": (2, 6)}),
        "transpose": ([leaf(rng, 2, 3, 4)], {"axes": (2, 0, 1)}),
        "narrow": ([leaf(rng, 2, 5, 3)], {"axis": 1, "start": 1, "stop": 4}),
    }


def test_every_catalogued_op_has_a_gradient_case():
    assert set(op_cases(np.random.default_rng(0))) == set(OPS)


@pytest.mark.parametrize("kind", sorted(OPS))
def test_op_gradients_match_central_differences(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    inputs, params = op_cases(rng)[kind]
    # a random linear functional so every output entry matters
    w = rng.normal(size=apply(kind, inputs, params).shape)

    def f():
        return sum_(mul(apply(kind, inputs, params), Tensor(w)))

    assert finite_diff_check(f, inputs, eps=1e-5) < 1e-6


def test_dropout_gradient_in_training_mode_uses_the_same_mask():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 6)), requires_grad=True)

    def f():
        return sum_(apply("dropout", [x], {"p": 0.4, "rng": np.random.default_rng(11), "training": True}))

    assert finite_diff_check(f, [x], eps=1e-5) < 1e-6


def test_softmax_of_uniform_logits():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(5))).data, np.full(5, 0.2), atol=1e-7)


def test_sigmoid_at_zero():
    assert sigmoid(Tensor(np.zeros(1))).data[0] == 0.5


def test_matmul_identity(rng):
    m = rng.normal(size=(3, 3)).astype(np.float32)
    np.testing.assert_array_equal(matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(m)).data, m)


def test_square_sum_gradient():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    backward(sum_(mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_constant_loss_populates_nothing():
    c = Tensor(np.array(3.0))
    backward(c)
    assert c.grad is None


def test_backward_twice_doubles_leaf_gradient(rng):
    x = Tensor(rng.normal(size=(4,)), requires_grad=True)
    loss = sum_(mul(x, x))
    backward(loss)
    once = x.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * once)


def test_non_scalar_loss_rejected(rng):
    with pytest.raises(ShapeError):
        backward(Tensor(rng.normal(size=3), requires_grad=True) * 2.0)


def test_shape_error_names_op_and_dims():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_log_domain_error():
    with pytest.raises(DomainError):
        log(Tensor(np.array([1.0, 0.0])))


def test_dropout_probability_validated():
    with pytest.raises(ValueError):
        apply("dropout", [Tensor(np.ones(3))], {"p": 1.0, "rng": np.random.default_rng(0), "training": True})


def test_dropout_is_identity_in_eval_and_unbiased_in_train():
    x = Tensor(np.ones((200, 200), dtype=np.float32))
    np.testing.assert_array_equal(apply("dropout", [x], {"p": 0.5, "training": False}).data, x.data)
    y = apply("dropout", [x], {"p": 0.25, "rng": np.random.default_rng(0), "training": True}).data
    assert set(np.unique(y)) <= {0.0, np.float32(1 / 0.75)}
    assert abs(y.mean() - 1.0) < 0.02


def test_no_grad_records_nothing(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with no_grad():
        y = mul(x, x)
    assert not y.requires_grad and y._backward is None


def test_unknown_op_kind():
    with pytest.raises(ValueError, match="unknown op"):
        apply("conv2d", [Tensor(np.ones(2))])


def test_finite_diff_check_on_quadratic():
    x = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    err = finite_diff_check(lambda: sum_(mul(x, x)), [x], eps=1e-3)
    assert err < 1e-4


def test_attention_is_causal(rng):
    q, k, v = (Tensor(rng.normal(size=(1, 2, 6, 4)).astype(np.float32)) for _ in range(3))
    base = causal_attention(q, k, v).data
    k2, v2 = Tensor(k.data.copy()), Tensor(v.data.copy())
    k2.data[:, :, 4:] += 5.0
    v2.data[:, :, 4:] -= 3.0
    out = causal_attention(q, k2, v2).data
    np.testing.assert_array_equal(out[:, :, :4], base[:, :, :4])


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)), elements=st.floats(-50, 50))


@given(finite_rows)
def test_softmax_rows_sum_to_one(x):
    p = softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


@given(arrays(np.float32, st.integers(1, 20), elements=st.floats(-80, 80, width=32)))
def test_sigmoid_inside_open_interval(x):
    s = sigmoid(Tensor(x)).data
    assert np.all(np.isfinite(s))
    assert np.all((s > 0) & (s < 1)) or np.any(np.abs(x) > 15)


def test_log_sigmoid_stays_finite_at_extremes():
    out = apply("log_sigmoid", [Tensor(np.array([-1000.0, 0.0, 1000.0]))]).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [-1000.0, -np.log(2), 0.0], atol=1e-12)
