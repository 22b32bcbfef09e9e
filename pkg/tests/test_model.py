from pathlib import Path

import numpy as np
import pytest
from conftest import TINY
from hypothesis import given
from hypothesis import strategies as st

from qlora_cls.lora import LoraConfig
from qlora_cls.model import ModelConfig, TransformerModel, last_positions, last_token_state
from qlora_cls.objectives import token_nll
from qlora_cls.tensor import log_softmax
from qlora_cls.training import AdamW

GOLDEN = Path(__file__).parent / "golden" / "hidden_tiny.npy"


def test_single_token_shape(tiny_model):
    assert tiny_model.forward([[256]]).shape == (1, 1, 16)


def test_hidden_states_match_golden_snapshot():
    ids = np.random.default_rng(99).integers(0, 258, size=(2, 12))
    np.testing.assert_array_equal(TransformerModel(TINY).forward(ids).data, np.load(GOLDEN))


def test_eval_forward_is_deterministic(tiny_model):
    ids = np.arange(20)[None] + 40
    np.testing.assert_array_equal(tiny_model.forward(ids).data, tiny_model.forward(ids).data)


@given(st.integers(1, 15), st.integers(0, 257))
def test_suffix_perturbation_leaves_prefix_bitwise_unchanged(t, new_id):
    model = TransformerModel(TINY)
    ids = (np.arange(16)[None] * 7) % 256
    h = model.forward(ids).data
    ids2 = ids.copy()
    ids2[0, t] = new_id
    np.testing.assert_array_equal(model.forward(ids2).data[:, :t], h[:, :t])


def test_right_padding_does_not_change_unmasked_states(tiny_model):
    ids = np.array([[256, 5, 6, 7, 8]])
    padded = np.array([[256, 5, 6, 7, 8, 257, 257, 257]])
    mask = np.array([[1, 1, 1, 1, 1, 0, 0, 0]])
    h = tiny_model.forward(ids).data
    hp = tiny_model.forward(padded, mask).data
    np.testing.assert_allclose(hp[:, :5], h, rtol=0, atol=1e-6)
    s = last_token_state(tiny_model.forward(padded, mask), mask).data
    np.testing.assert_allclose(s, h[:, -1], rtol=0, atol=1e-6)


def test_padding_never_leaks_into_other_rows(tiny_model):
    a = np.array([[256, 1, 2, 257, 257]])
    b = np.array([[256, 9, 9, 9, 9]])
    batch = np.concatenate([a, b])
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]])
    alone = tiny_model.forward(a[:, :3]).data
    np.testing.assert_allclose(tiny_model.forward(batch, mask).data[0, :3], alone[0], atol=1e-6)


def test_last_positions_index_arithmetic():
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]])
    assert last_positions(mask).tolist() == [2, 4]


def test_all_masked_row_rejected(tiny_model):
    h = tiny_model.forward([[1, 2]])
    with pytest.raises(ValueError, match="unmasked"):
        last_token_state(h, np.array([[0, 0]]))


def test_out_of_vocab_and_over_length(tiny_model):
    with pytest.raises(ValueError, match="vocabulary"):
        tiny_model.forward([[258]])
    with pytest.raises(ValueError, match="max_seq_len"):
        tiny_model.forward(np.zeros((1, 65), dtype=int))


def test_logits_shape_and_normalization(tiny_model):
    h = tiny_model.forward(np.array([[256, 3, 4], [256, 5, 6]]))
    logits = tiny_model.lm_logits(h)
    assert logits.shape == (2, 3, 258)
    p = np.exp(log_softmax(logits).data.astype(np.float64))
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_parameter_count_closed_form():
    cfg = ModelConfig(d_model=32, n_layers=3, n_heads=4, d_ff=64, max_seq_len=50)
    d, f = 32, 64
    expected = 258 * d + 50 * d + 3 * (4 * d * d + 2 * d * f + 2 * d) + d
    assert TransformerModel(cfg).base_parameter_count() == cfg.base_parameter_count() == expected


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(d_model=30, n_heads=4)


def test_overfits_a_single_sequence():
    # reference width: at d=16 the frozen norm and tied head cap the logit margin
    model = TransformerModel(ModelConfig(max_seq_len=16))
    model.attach_lora(LoraConfig(rank=8, dropout=0.0))
    ids = np.array([[256] + list(b"qlora") + [257]])
    mask = np.ones_like(ids)
    opt = AdamW(model.trainable_parameters(), weight_decay=0.0)
    for _ in range(200):
        opt.zero_grad()
        loss = token_nll(model.lm_logits(model.forward(ids, training=True)), ids, mask)
        loss.backward()
        opt.step(1e-2)
    assert float(loss.data) < 0.05
