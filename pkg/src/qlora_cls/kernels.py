"""Blockwise absmax codebook quantization kernels.

Each kernel exists twice: a numba-compiled scalar loop and a vectorized numpy
version. Both must return identical codes; ``tests/test_kernels.py`` checks
parity and ``benchmarks/bench_kernels.py`` times them against each other.

Conventions shared by both paths:

* values are normalized in float64 by the block absmax;
* the chosen code is the codebook entry at minimal ``abs(x - level)``;
  exact ties go to the even index;
* an all-zero block gets scale 0 and every code points at the zero level.
"""

from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

__all__ = [
    "quantize_blockwise",
    "dequantize_blockwise",
    "quantize_blockwise_numpy",
    "dequantize_blockwise_numpy",
    "quantize_blockwise_numba",
    "dequantize_blockwise_numba",
    "backend",
]


def quantize_blockwise_numpy(flat, block_size, codebook, zero_index):
    flat = np.asarray(flat, dtype=np.float64).ravel()
    n = flat.size
    n_blocks = -(-n // block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.float64)
    padded[:n] = flat
    blocks = padded.reshape(n_blocks, block_size)
    scales = np.abs(blocks).max(axis=1)
    safe = np.where(scales > 0, scales, 1.0)
    x = (blocks / safe[:, None]).ravel()[:n]

    m = codebook.size
    hi = np.clip(np.searchsorted(codebook, x), 1, m - 1)
    lo = hi - 1
    d_lo = np.abs(x - codebook[lo])
    d_hi = np.abs(x - codebook[hi])
    tie_pick = np.where(lo % 2 == 0, lo, hi)
    codes = np.where(d_hi < d_lo, hi, np.where(d_lo < d_hi, lo, tie_pick))

    zero_block = np.repeat(scales == 0, block_size)[:n]
    codes = np.where(zero_block, zero_index, codes)
    return codes.astype(np.uint8), scales


def dequantize_blockwise_numpy(codes, scales, block_size, codebook):
    n = codes.size
    per_value = np.repeat(scales.astype(np.float32), block_size)[:n]
    return codebook.astype(np.float32)[codes] * per_value


@njit
def quantize_blockwise_numba(flat, block_size, codebook, zero_index):
    n = flat.size
    n_blocks = (n + block_size - 1) // block_size
    m = codebook.size
    codes = np.empty(n, dtype=np.uint8)
    scales = np.zeros(n_blocks, dtype=np.float64)
    for b in range(n_blocks):
        start = b * block_size
        stop = min(start + block_size, n)
        amax = 0.0
        for i in range(start, stop):
            a = abs(flat[i])
            if a > amax:
                amax = a
        scales[b] = amax
        if amax == 0.0:
            for i in range(start, stop):
                codes[i] = zero_index
            continue
        for i in range(start, stop):
            x = flat[i] / amax
            # first index with codebook[idx] >= x
            left = 0
            right = m
            while left < right:
                mid = (left + right) // 2
                if codebook[mid] < x:
                    left = mid + 1
                else:
                    right = mid
            hi = min(max(left, 1), m - 1)
            lo = hi - 1
            d_lo = abs(x - codebook[lo])
            d_hi = abs(x - codebook[hi])
            if d_hi < d_lo:
                codes[i] = hi
            elif d_lo < d_hi:
                codes[i] = lo
            elif lo % 2 == 0:
                codes[i] = lo
            else:
                codes[i] = hi
    return codes, scales


@njit
def dequantize_blockwise_numba(codes, scales, block_size, codebook):
    n = codes.size
    out = np.empty(n, dtype=np.float32)
    for i in range(n):
        out[i] = np.float32(codebook[codes[i]]) * np.float32(scales[i // block_size])
    return out


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


def quantize_blockwise(flat, block_size: int, codebook: np.ndarray, zero_index: int):
    """Return ``(codes uint8, scales float64)`` for a flat value array."""
    flat = np.ascontiguousarray(np.asarray(flat, dtype=np.float64).ravel())
    codebook = np.ascontiguousarray(codebook, dtype=np.float64)
    if USE_NUMBA:
        return quantize_blockwise_numba(flat, int(block_size), codebook, int(zero_index))
    return quantize_blockwise_numpy(flat, int(block_size), codebook, int(zero_index))


def dequantize_blockwise(codes, scales, block_size: int, codebook: np.ndarray) -> np.ndarray:
    """Flat float32 reconstruction ``codebook[code] * scale``."""
    codes = np.ascontiguousarray(codes, dtype=np.uint8).ravel()
    scales = np.ascontiguousarray(scales, dtype=np.float64)
    codebook = np.ascontiguousarray(codebook, dtype=np.float64)
    if USE_NUMBA:
        return dequantize_blockwise_numba(codes, scales, int(block_size), codebook)
    return dequantize_blockwise_numpy(codes, scales, int(block_size), codebook)
