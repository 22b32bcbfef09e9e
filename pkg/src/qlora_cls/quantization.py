"""NF4 weight quantization and 8-bit optimizer-state quantization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, add, matmul

# 16 NormalFloat levels: normal quantiles rescaled to [-1, 1] with an exact zero.
NF4_LEVELS = np.array(
    [
        -1.0,
        -0.6961928009986877,
        -0.5250730514526367,
        -0.39491748809814453,
        -0.28444138169288635,
        -0.18477343022823334,
        -0.09105003625154495,
        0.0,
        0.07958029955625534,
        0.16093020141124725,
        0.24611230194568634,
        0.33791524171829224,
        0.44070982933044434,
        0.5626170039176941,
        0.7229568362236023,
        1.0,
    ],
    dtype=np.float32,
)
NF4_ZERO_INDEX = 7


class NonFiniteError(ValueError):
    pass


def create_dynamic_map(signed: bool = True, max_exponent_bits: int = 7, total_bits: int = 8) -> np.ndarray:
    """Dynamic tree quantization map: sorted levels in ``[-1, 1]``.

    Each exponent ``e`` contributes linearly spaced fractions scaled by
    ``10**e``, giving fine resolution near zero and coarse resolution near
    the block maximum.
    """
    data: list[float] = []
    non_sign_bits = total_bits - 1
    additional_items = 2 ** (non_sign_bits - max_exponent_bits) - 1
    for i in range(max_exponent_bits):
        if signed:
            fraction_items = 2 ** (i + non_sign_bits - max_exponent_bits) + 1
        else:
            fraction_items = 2 ** (i + non_sign_bits - max_exponent_bits + 1) + 1
        boundaries = np.linspace(0.1, 1, fraction_items)
        means = (boundaries[:-1] + boundaries[1:]) / 2.0
        data += (10.0 ** (-(max_exponent_bits - 1) + i) * means).tolist()
        if signed:
            data += (-(10.0 ** (-(max_exponent_bits - 1) + i)) * means).tolist()
    if additional_items > 0:
        boundaries = np.linspace(0.1, 1, additional_items + 1)
        means = (boundaries[:-1] + boundaries[1:]) / 2.0
        data += (10.0 ** (-(max_exponent_bits - 1) + max_exponent_bits - 1) * means).tolist()
        if signed:
            data += (-(10.0 ** (-(max_exponent_bits - 1) + max_exponent_bits - 1)) * means).tolist()
    data.append(0.0)
    data.append(1.0)
    data += [0.0] * (2**total_bits - len(data))
    return np.sort(np.asarray(data, dtype=np.float32))


DYNAMIC_MAP_8BIT = create_dynamic_map()
DYNAMIC_ZERO_INDEX = int(np.flatnonzero(DYNAMIC_MAP_8BIT == 0.0)[0])


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{what} contains NaN or Inf")


@dataclass(frozen=True)
class QuantizedMatrix:
    """Frozen NF4 matrix: one 4-bit code per weight plus per-block absmax scales.

    Codes are stored one per byte for simplicity; only values 0..15 occur.
    """

    rows: int
    cols: int
    block_size: int
    codes: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        n = self.rows * self.cols
        if self.codes.shape != (n,):
            raise ValueError(f"expected {n} codes, got {self.codes.shape}")
        if self.scales.shape != (-(-n // self.block_size),):
            raise ValueError("scale count does not match ceil(rows*cols / block_size)")
        self.codes.setflags(write=False)
        self.scales.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def fingerprint(self) -> bytes:
        return self.codes.tobytes() + self.scales.tobytes()


def quantize_nf4(weights, block_size: int = 64) -> QuantizedMatrix:
    w = np.asarray(weights)
    if w.ndim != 2:
        raise ShapeError("quantize_nf4", f"expected a matrix, got shape {w.shape}")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    _check_finite(w, "weights")
    codes, scales = kernels.quantize_blockwise(w.ravel(), block_size, NF4_LEVELS, NF4_ZERO_INDEX)
    return QuantizedMatrix(
        rows=w.shape[0],
        cols=w.shape[1],
        block_size=block_size,
        codes=np.array(codes, dtype=np.uint8),
        scales=np.array(scales, dtype=np.float32),
    )


def dequantize_nf4(q: QuantizedMatrix) -> np.ndarray:
    flat = kernels.dequantize_blockwise(q.codes, q.scales, q.block_size, NF4_LEVELS)
    return flat.reshape(q.rows, q.cols)


def roundtrip_rmse(weights, block_size: int = 64) -> float:
    w = np.asarray(weights, dtype=np.float64)
    back = dequantize_nf4(quantize_nf4(w, block_size)).astype(np.float64)
    return float(np.sqrt(np.mean((w - back) ** 2)))


def quantized_linear_forward(x: Tensor, q: QuantizedMatrix, adapter=None, training: bool = False, rng=None) -> Tensor:
    """``x @ dequantize(q).T`` plus the adapter's low-rank delta.

    The dequantized weight is rebuilt on every call and enters the graph as a
    constant, so no gradient ever reaches ``q``.
    """
    if x.shape[-1] != q.cols:
        raise ShapeError("quantized_linear", f"input dim {x.shape[-1]} != weight cols {q.cols}")
    w = Tensor(dequantize_nf4(q).T)
    y = matmul(x, w)
    if adapter is not None:
        y = add(y, adapter.delta(x, training=training, rng=rng))
    return y


@dataclass
class Quantized8bitState:
    codes: np.ndarray
    scales: np.ndarray
    block_size: int
    shape: tuple

    def __post_init__(self):
        n = int(np.prod(self.shape))
        if self.codes.shape != (n,) or self.scales.shape != (-(-n // self.block_size),):
            raise ValueError("code/scale counts do not match shape and block size")


def adamw8bit_pack(moments, block_size: int = 256) -> Quantized8bitState:
    m = np.asarray(moments)
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    _check_finite(m, "optimizer moments")
    codes, scales = kernels.quantize_blockwise(m.ravel(), block_size, DYNAMIC_MAP_8BIT, DYNAMIC_ZERO_INDEX)
    return Quantized8bitState(
        codes=np.asarray(codes, dtype=np.uint8),
        scales=np.asarray(scales, dtype=np.float32),
        block_size=block_size,
        shape=tuple(m.shape),
    )


def adamw8bit_unpack(state: Quantized8bitState) -> np.ndarray:
    flat = kernels.dequantize_blockwise(state.codes, state.scales, state.block_size, DYNAMIC_MAP_8BIT)
    return flat.reshape(state.shape)
