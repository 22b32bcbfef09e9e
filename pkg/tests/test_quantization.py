import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import norm

from qlora_cls import kernels
from qlora_cls.lora import LoraAdapter
from qlora_cls.quantization import (
    DYNAMIC_MAP_8BIT,
    NF4_LEVELS,
    NF4_ZERO_INDEX,
    NonFiniteError,
    adamw8bit_pack,
    adamw8bit_unpack,
    dequantize_nf4,
    quantize_nf4,
    quantized_linear_forward,
    roundtrip_rmse,
)
from qlora_cls.tensor import Tensor, backward, sum_

# brute-force oracle RMSE for default_rng(2024) N(0,1) 64x64, block 64
ORACLE_RMSE_4096 = 0.0928201508272466


def brute_force_nf4(w, block_size=64):
    """Exhaustive nearest-level search, independent of the kernels."""
    x = np.asarray(w, dtype=np.float64).ravel()
    pad = (-x.size) % block_size
    blocks = np.concatenate([x, np.zeros(pad)]).reshape(-1, block_size)
    scale = np.abs(blocks).max(axis=1, keepdims=True)
    normed = np.divide(blocks, scale, out=np.zeros_like(blocks), where=scale > 0)
    dist = np.abs(normed[..., None] - NF4_LEVELS.astype(np.float64))
    codes = np.empty(dist.shape[:-1], dtype=np.int64)
    for idx in np.ndindex(*dist.shape[:-1]):
        d = dist[idx]
        best = np.flatnonzero(d == d.min())
        even = best[best % 2 == 0]
        codes[idx] = even[0] if even.size else best[0]
    return codes.ravel()[: x.size], scale.ravel()


def test_codebook_matches_normal_quantile_construction():
    # 8 positive and 7 negative quantiles of N(0,1) plus an exact zero, scaled to [-1, 1]
    offset = 0.9677083
    pos = norm.ppf(np.linspace(offset, 0.5, 9)[:-1])
    neg = -norm.ppf(np.linspace(offset, 0.5, 8)[:-1])
    levels = np.sort(np.concatenate([pos, [0.0], neg]))
    levels /= levels.max()
    np.testing.assert_allclose(NF4_LEVELS, levels, atol=2e-7)


def test_codebook_shape_and_order():
    assert NF4_LEVELS.shape == (16,)
    assert np.all(np.diff(NF4_LEVELS) > 0)
    assert NF4_LEVELS[0] == -1.0 and NF4_LEVELS[-1] == 1.0
    assert NF4_LEVELS[NF4_ZERO_INDEX] == 0.0


def test_all_zero_block():
    q = quantize_nf4(np.zeros((2, 2), dtype=np.float32))
    assert q.scales.tolist() == [0.0]
    assert set(q.codes.tolist()) == {NF4_ZERO_INDEX}
    np.testing.assert_array_equal(dequantize_nf4(q), np.zeros((2, 2)))


def test_endpoints_map_to_extreme_codes():
    q = quantize_nf4(np.array([[-1.0, 1.0]], dtype=np.float32))
    assert q.codes.tolist() == [0, 15]
    assert q.scales.tolist() == [1.0]


def test_random_matrix_matches_brute_force():
    w = np.random.default_rng(5).normal(size=(64, 64)).astype(np.float32)
    q = quantize_nf4(w)
    codes, scales = brute_force_nf4(w)
    np.testing.assert_array_equal(q.codes, codes)
    expected = NF4_LEVELS[codes].reshape(64, 64) * scales.astype(np.float32).repeat(64).reshape(64, 64)
    np.testing.assert_array_equal(dequantize_nf4(q), expected)


def test_ties_round_to_even_index():
    # normalized value exactly halfway between levels 8 and 9; absmax 1 keeps the scale exact
    mid = (np.float64(NF4_LEVELS[8]) + np.float64(NF4_LEVELS[9])) / 2
    q = kernels.quantize_blockwise_numpy(np.array([mid, 1.0]), 2, NF4_LEVELS, NF4_ZERO_INDEX)
    assert q[0].tolist() == [8, 15]
    mid = (np.float64(NF4_LEVELS[9]) + np.float64(NF4_LEVELS[10])) / 2
    q = kernels.quantize_blockwise_numba(np.array([mid, 1.0]), 2, NF4_LEVELS, NF4_ZERO_INDEX)
    assert q[0].tolist() == [10, 15]


def test_requantization_is_a_fixed_point(rng):
    w = rng.normal(size=(16, 40)).astype(np.float32)
    q = quantize_nf4(w, 64)
    q2 = quantize_nf4(dequantize_nf4(q), 64)
    np.testing.assert_array_equal(q.codes, q2.codes)


def test_roundtrip_rmse_matches_oracle():
    w = np.random.default_rng(2024).normal(size=(64, 64)).astype(np.float32)
    assert abs(roundtrip_rmse(w) - ORACLE_RMSE_4096) < 1e-7


def test_code_and_scale_counts_with_ragged_tail(rng):
    q = quantize_nf4(rng.normal(size=(7, 13)), block_size=64)
    assert q.codes.shape == (91,) and q.scales.shape == (2,)
    assert q.codes.max() <= 15 and np.all(q.scales >= 0)


def test_non_finite_weights_rejected():
    with pytest.raises(NonFiniteError):
        quantize_nf4(np.array([[1.0, np.nan]]))


def test_quantized_storage_is_read_only(rng):
    q = quantize_nf4(rng.normal(size=(4, 16)))
    with pytest.raises(ValueError):
        q.codes[0] = 1


def test_exact_levels_reproduce_dense_product(rng):
    w = np.eye(4, dtype=np.float32)
    w[0, 1] = NF4_LEVELS[3]
    x = rng.normal(size=(3, 4)).astype(np.float32)
    y = quantized_linear_forward(Tensor(x), quantize_nf4(w, 16)).data
    np.testing.assert_array_equal(y, x @ w.T)


def test_zero_adapter_leaves_output_unchanged(rng):
    q = quantize_nf4(rng.normal(size=(8, 16)))
    x = Tensor(rng.normal(size=(2, 16)).astype(np.float32))
    a = LoraAdapter(16, 8, rank=4, alpha=8, rng=rng)
    np.testing.assert_array_equal(quantized_linear_forward(x, q, a).data, quantized_linear_forward(x, q).data)


def test_gradients_reach_adapter_and_input_only(rng):
    q = quantize_nf4(rng.normal(size=(8, 16)))
    before = q.fingerprint()
    x = Tensor(rng.normal(size=(2, 16)).astype(np.float32), requires_grad=True)
    a = LoraAdapter(16, 8, rank=4, alpha=8, rng=rng)
    backward(sum_(quantized_linear_forward(x, q, a)))
    assert x.grad is not None and a.B.grad is not None
    assert q.fingerprint() == before


@given(
    arrays(np.float64, st.integers(1, 200), elements=st.floats(-1e4, 1e4)),
    st.sampled_from([1, 3, 16, 64]),
)
def test_numba_and_numpy_kernels_agree(x, block):
    c1, s1 = kernels.quantize_blockwise_numpy(x, block, NF4_LEVELS, NF4_ZERO_INDEX)
    c2, s2 = kernels.quantize_blockwise_numba(x, block, NF4_LEVELS, NF4_ZERO_INDEX)
    np.testing.assert_array_equal(c1, c2)
    np.testing.assert_array_equal(s1, s2)
    d1 = kernels.dequantize_blockwise_numpy(c1, s1.astype(np.float32), block, NF4_LEVELS)
    d2 = kernels.dequantize_blockwise_numba(c2, s2.astype(np.float32), block, NF4_LEVELS)
    np.testing.assert_array_equal(d1, d2)


@given(arrays(np.float64, 64, elements=st.floats(-100, 100)))
def test_roundtrip_error_within_half_local_gap(x):
    q = quantize_nf4(x.reshape(1, 64))
    back = dequantize_nf4(q).astype(np.float64).ravel()
    scale = float(q.scales[0])
    levels = NF4_LEVELS.astype(np.float64)
    gaps = np.diff(levels)
    code = q.codes.astype(int)
    # the larger neighbouring gap bounds the distance to the chosen level
    local = np.maximum(gaps[np.clip(code - 1, 0, 14)], gaps[np.clip(code, 0, 14)])
    assert np.all(np.abs(back - x) <= scale * local / 2 + 1e-6 * max(scale, 1e-30))


@given(arrays(np.float32, 64, elements=st.floats(-10, 10, width=32)), st.integers(-20, 20))
def test_power_of_two_scaling_is_exactly_equivariant(x, e):
    c = np.float32(2.0**e)
    a = quantize_nf4(x.reshape(1, 64))
    b = quantize_nf4((x * c).reshape(1, 64))
    np.testing.assert_array_equal(a.codes, b.codes)


def test_zero_moments_roundtrip():
    st8 = adamw8bit_pack(np.zeros(300, dtype=np.float32))
    np.testing.assert_array_equal(adamw8bit_unpack(st8), np.zeros(300))


def test_dynamic_map_is_sorted_with_zero_and_unit_extremes():
    assert DYNAMIC_MAP_8BIT.shape == (256,)
    assert np.all(np.diff(DYNAMIC_MAP_8BIT) > 0)
    assert 0.0 in DYNAMIC_MAP_8BIT and DYNAMIC_MAP_8BIT[-1] == 1.0


def test_8bit_state_is_nearest_point_and_idempotent(rng):
    m = rng.normal(size=(3, 200)).astype(np.float32) * 1e-3
    s = adamw8bit_pack(m)
    back = adamw8bit_unpack(s)
    assert back.shape == m.shape
    flat, n = m.ravel().astype(np.float64), m.size
    scales = np.abs(np.concatenate([flat, np.zeros((-n) % 256)])).reshape(-1, 256).max(axis=1)
    normed = flat / scales.repeat(256)[:n]
    nearest = np.abs(normed[:, None] - DYNAMIC_MAP_8BIT.astype(np.float64)).argmin(axis=1)
    np.testing.assert_array_equal(s.codes, nearest)
    again = adamw8bit_pack(back)
    np.testing.assert_array_equal(again.codes, s.codes)


def test_8bit_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        adamw8bit_pack(np.array([np.inf, 1.0]))


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = {**os.environ, "QLORA_CLS_DISABLE_NUMBA": flag}
    out = subprocess.run(
        [sys.executable, "-c", "from qlora_cls import kernels; print(kernels.backend())"],
        env=env,
        capture_output=True,
        text=True,
        check=True,
    )
    assert out.stdout.strip() == expected
