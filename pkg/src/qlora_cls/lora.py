"""Low-rank adapters over frozen quantized projections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantization import QuantizedMatrix, dequantize_nf4
from .tensor import ShapeError, Tensor, dropout, matmul, mul, transpose

ATTENTION_TARGETS = ("q", "k", "v", "o")
FEED_FORWARD_TARGETS = ("up", "down")
ALL_TARGETS = ATTENTION_TARGETS + FEED_FORWARD_TARGETS


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 16
    alpha: float = 16.0
    dropout: float = 0.05
    targets: tuple = ALL_TARGETS

    def __post_init__(self):
        if int(self.rank) < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"LoRA dropout must lie in [0, 1), got {self.dropout}")
        unknown = set(self.targets) - set(ALL_TARGETS)
        if unknown:
            raise ValueError(f"unknown LoRA targets: {sorted(unknown)}")


class LoraAdapter:
    """Trainable pair ``A`` (r x d_in) and ``B`` (d_out x r), no bias.

    ``A`` starts from N(0, 0.02^2) and ``B`` from zeros, so the delta is
    exactly zero until the first update.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, dropout_p: float = 0.0, rng=None):
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in = d_in
        self.d_out = d_out
        self.rank = rank
        self.alpha = float(alpha)
        self.dropout_p = float(dropout_p)
        self.A = Tensor(rng.normal(0.0, 0.02, size=(rank, d_in)).astype(np.float32), requires_grad=True)
        self.B = Tensor(np.zeros((d_out, rank), dtype=np.float32), requires_grad=True)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]

    def num_parameters(self) -> int:
        return self.rank * (self.d_in + self.d_out)

    def delta(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        return adapter_delta(x, self, training, rng)

    def dense(self) -> np.ndarray:
        """``scaling * B @ A`` as a d_out x d_in matrix."""
        return np.float32(self.scaling) * (self.B.data @ self.A.data)


def adapter_delta(x: Tensor, adapter: LoraAdapter, train_mode: bool = False, rng=None) -> Tensor:
    if x.shape[-1] != adapter.d_in:
        raise ShapeError("lora", f"input dim {x.shape[-1]} != adapter d_in {adapter.d_in}")
    h = dropout(x, adapter.dropout_p, rng, train_mode)
    h = matmul(h, transpose(adapter.A))
    h = matmul(h, transpose(adapter.B))
    return mul(h, np.float32(adapter.scaling))


def merge(q: QuantizedMatrix, adapter: LoraAdapter) -> np.ndarray:
    """Dense ``dequantize(q) + scaling * B @ A`` (rows = outputs)."""
    if q.shape != (adapter.d_out, adapter.d_in):
        raise ShapeError("merge", f"weight {q.shape} vs adapter ({adapter.d_out}, {adapter.d_in})")
    return dequantize_nf4(q) + adapter.dense()


def count_trainable(model, head=None) -> int:
    """Adapter parameters in ``model`` plus the classification head, if any."""
    total = sum(a.num_parameters() for a in model.adapters())
    if head is not None:
        total += head.num_parameters()
    return total
