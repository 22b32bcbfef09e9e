import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qlora_cls.objectives import (
    ANSWER_ONLY,
    FULL_SEQUENCE,
    ClassifierHead,
    bce_loss,
    ce_loss,
    head_logits,
    per_token_nll,
    predict_multilabel,
    supervision_mask,
    token_nll,
)
from qlora_cls.tensor import Tensor, finite_diff_check


def test_head_bias_only():
    h = ClassifierHead(3, 4)
    h.W.data[:] = 0
    h.b.data[:] = [1, 2, 3]
    np.testing.assert_array_equal(head_logits(Tensor(np.ones((2, 4), np.float32)), h).data, [[1, 2, 3]] * 2)


def test_head_two_class_example():
    h = ClassifierHead(2, 3)
    h.W.data = np.array([[1, 0, 0], [-1, 0, 0]], np.float32)
    h.b.data[:] = 0
    np.testing.assert_array_equal(head(h, [3, 0, 0]), [[3, -3]])


def head(h, s):
    return head_logits(Tensor(np.array([s], np.float32)), h).data


def test_head_class_count_validation():
    with pytest.raises(ValueError):
        ClassifierHead(1, 4)
    ClassifierHead(1, 4, multilabel=True)


def test_ce_head_gradients(rng):
    h = ClassifierHead(5, 8, rng)
    for p in h.parameters():
        p.data = p.data.astype(np.float64)
    s = Tensor(rng.normal(size=(3, 8)))
    assert finite_diff_check(lambda: ce_loss(head_logits(s, h), [0, 4, 2]), h.parameters(), eps=1e-6) < 1e-6


def test_ce_uniform():
    assert abs(float(ce_loss(Tensor(np.zeros((4, 5), np.float32)), [0, 1, 2, 3]).data) - math.log(5)) < 1e-6


def test_ce_saturated():
    z = np.zeros((1, 5))
    z[0, 2] = 40.0
    assert float(ce_loss(Tensor(z), [2]).data) < 1e-8


def test_ce_hand_value():
    z = np.array([[1.0, 2.0, 3.0]])
    brute = -math.log(math.exp(3) / sum(math.exp(v) for v in (1, 2, 3)))
    assert abs(brute - 0.40761) < 1e-5
    assert abs(float(ce_loss(Tensor(z), [2]).data) - brute) < 1e-12


def test_ce_target_range():
    with pytest.raises(ValueError):
        ce_loss(Tensor(np.zeros((1, 3))), [3])


@given(arrays(np.float64, (3, 6), elements=st.floats(-20, 20)), st.floats(-50, 50))
def test_ce_shift_invariant_and_non_negative(z, c):
    t = [0, 5, 2]
    a = float(ce_loss(Tensor(z), t).data)
    b = float(ce_loss(Tensor(z + c), t).data)
    assert a >= 0 and abs(a - b) < 1e-6


def test_bce_at_zero():
    y = np.random.default_rng(0).integers(0, 2, size=(3, 14))
    assert abs(float(bce_loss(Tensor(np.zeros((3, 14), np.float32)), y).data) - 14 * math.log(2)) < 1e-6


def test_bce_saturated():
    y = np.array([[1, 0, 1]])
    z = np.where(y == 1, 20.0, -20.0)
    assert float(bce_loss(Tensor(z), y).data) < 1e-7


def test_bce_hand_value():
    sig1 = 1 / (1 + math.exp(-1))
    assert abs(sig1 - 0.731058) < 1e-6
    expected = -2 * math.log(sig1)
    assert abs(expected - 0.62652) < 1e-5
    assert abs(float(bce_loss(Tensor(np.array([[1.0, -1.0]])), [[1, 0]]).data) - expected) < 1e-12


@given(arrays(np.float64, (4, 5), elements=st.floats(-30, 30)), arrays(np.int8, (4, 5), elements=st.integers(0, 1)))
def test_bce_batch_is_mean_of_rows(z, y):
    whole = float(bce_loss(Tensor(z), y).data)
    rows = [float(bce_loss(Tensor(z[i : i + 1]), y[i : i + 1]).data) for i in range(4)]
    assert abs(whole - np.mean(rows)) < 1e-9


def test_bce_rejects_non_binary():
    with pytest.raises(ValueError):
        bce_loss(Tensor(np.zeros((1, 2))), [[0, 2]])


def test_predict_multilabel_boundaries():
    assert predict_multilabel(np.zeros((1, 4))).tolist() == [[1, 1, 1, 1]]
    assert predict_multilabel(np.array([[-10.0, 10.0]])).tolist() == [[0, 1]]
    z = np.array([[-1e-7, 1e-7, 0.0]])
    assert predict_multilabel(z).tolist() == [[0, 1, 1]]
    with pytest.raises(ValueError):
        predict_multilabel(z, 1.0)


@given(arrays(np.float64, 6, elements=st.floats(-10, 10)), st.integers(0, 5), st.floats(0, 5), st.floats(0.05, 0.95))
def test_predict_multilabel_monotone(z, c, bump, th):
    before = predict_multilabel(z[None], th)[0]
    z2 = z.copy()
    z2[c] += bump
    after = predict_multilabel(z2[None], th)[0]
    assert after[c] >= before[c]


def test_supervision_masks():
    assert supervision_mask(3, 2).tolist() == [0, 0, 0, 1, 1]
    assert supervision_mask(3, 2, FULL_SEQUENCE, n_pad=2).tolist() == [1, 1, 1, 1, 1, 0, 0]
    with pytest.raises(ValueError):
        supervision_mask(3, 0, ANSWER_ONLY)


def test_token_nll_uniform_over_256():
    # 3 supervised label tokens after a 4-token prompt, uniform logits
    logits = Tensor(np.zeros((1, 7, 256), np.float32))
    ids = np.arange(7)[None]
    assert abs(float(token_nll(logits, ids, supervision_mask(4, 3)[None]).data) - math.log(256)) < 1e-4


def test_token_nll_single_target_is_plain_nll(rng):
    logits = Tensor(rng.normal(size=(1, 2, 9)))
    ids = np.array([[3, 6]])
    lp = logits.data[0, 0] - np.logaddexp.reduce(logits.data[0, 0])
    assert abs(float(token_nll(logits, ids, [[1, 1]]).data) + lp[6]) < 1e-12


def test_token_nll_requires_a_target():
    with pytest.raises(ValueError):
        token_nll(Tensor(np.zeros((1, 3, 4))), [[0, 1, 2]], [[1, 0, 0]])


def test_answer_only_and_full_relate_through_per_token_dump(rng):
    logits = Tensor(rng.normal(size=(2, 9, 11)))
    ids = rng.integers(0, 11, size=(2, 9))
    dump = per_token_nll(logits, ids)
    ans = np.stack([supervision_mask(6, 3), supervision_mask(5, 4)])
    full = np.ones((2, 9))
    for m in (ans, full):
        w = m[:, 1:]
        expected = np.mean((dump[:, 1:] * w).sum(1) / w.sum(1))
        assert abs(float(token_nll(logits, ids, m).data) - expected) < 1e-5
    # masked prompt positions carry zero loss: no gradient reaches their logits
    lg = Tensor(logits.data.copy(), requires_grad=True)
    token_nll(lg, ids, ans).backward()
    assert np.all(lg.grad[0, :5] == 0) and np.all(lg.grad[1, :4] == 0)
    assert np.any(lg.grad[0, 5:8] != 0)


def test_token_nll_gradients(rng):
    logits = Tensor(rng.normal(size=(2, 5, 7)), requires_grad=True)
    ids = rng.integers(0, 7, size=(2, 5))
    m = np.array([[0, 0, 1, 1, 1], [0, 1, 1, 0, 0]])
    assert finite_diff_check(lambda: token_nll(logits, ids, m), [logits], eps=1e-6) < 1e-6
