"""Classification head and the four training objectives."""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    gather_last,
    log_sigmoid,
    log_softmax,
    matmul,
    mean,
    mul,
    narrow,
    neg,
    sum_,
    transpose,
)

ANSWER_ONLY = "answer_only"
FULL_SEQUENCE = "full_sequence"


class ClassifierHead:
    """Affine map ``z = W s + b`` from the last-token state to C logits."""

    def __init__(self, n_classes: int, d_model: int, rng=None, multilabel: bool = False):
        if n_classes < (1 if multilabel else 2):
            raise ValueError(f"need at least {1 if multilabel else 2} classes, got {n_classes}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_classes = n_classes
        self.d_model = d_model
        self.multilabel = multilabel
        self.W = Tensor(rng.normal(0.0, 0.02, size=(n_classes, d_model)).astype(np.float32), requires_grad=True)
        self.b = Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]

    def num_parameters(self) -> int:
        return self.n_classes * self.d_model + self.n_classes

    def __call__(self, s: Tensor) -> Tensor:
        return head_logits(s, self)


def head_logits(s: Tensor, head: ClassifierHead) -> Tensor:
    if s.ndim != 2 or s.shape[1] != head.d_model:
        raise ShapeError("head_logits", f"state {s.shape} vs head input dim {head.d_model}")
    return add(matmul(s, transpose(head.W)), head.b)


def ce_loss(z: Tensor, targets) -> Tensor:
    """Mean of ``-log softmax(z)[y]`` over the batch; targets are 0-based."""
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if z.ndim != 2 or t.shape[0] != z.shape[0]:
        raise ShapeError("ce_loss", f"logits {z.shape} vs {t.shape[0]} targets")
    if np.any(t < 0) or np.any(t >= z.shape[1]):
        raise ValueError(f"target class outside [0, {z.shape[1]})")
    picked = gather_last(log_softmax(z, axis=-1), t)
    return neg(mean(picked))


def bce_loss(z: Tensor, targets) -> Tensor:
    """Mean over examples of the summed per-label binary cross-entropy."""
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError("bce_loss", f"logits {z.shape} vs targets {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("multi-label targets must be 0/1")
    pos = mul(log_sigmoid(z), y)
    negs = mul(log_sigmoid(neg(z)), 1.0 - y)
    per_example = sum_(add(pos, negs), axis=-1)
    return neg(mean(per_example))


def predict_multilabel(z, threshold: float = 0.5) -> np.ndarray:
    """Bit ``c`` is set iff ``sigmoid(z_c) >= threshold``.

    The comparison runs in logit space so that threshold 0.5 is exactly
    ``z_c >= 0``.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    z = z.data if isinstance(z, Tensor) else np.asarray(z)
    cut = math.log(threshold / (1.0 - threshold))
    return (z.astype(np.float64) >= cut).astype(np.int8)


def supervision_mask(n_prompt: int, n_answer: int, mode: str = ANSWER_ONLY, n_pad: int = 0) -> np.ndarray:
    """Bits over ``prompt || answer || padding``."""
    if n_answer < 1 and mode == ANSWER_ONLY:
        raise ValueError("answer-only supervision needs at least one answer token")
    if mode == ANSWER_ONLY:
        bits = [0] * n_prompt + [1] * n_answer
    elif mode == FULL_SEQUENCE:
        bits = [1] * (n_prompt + n_answer)
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    return np.array(bits + [0] * n_pad, dtype=np.int8)


def per_token_nll(logits: Tensor, token_ids) -> np.ndarray:
    """``-log p(s_t | s_<t)`` for every position; position 0 has no context and gets 0."""
    ids = np.asarray(token_ids, dtype=np.int64)
    lp = log_softmax(Tensor(logits.data[:, :-1]), axis=-1).data
    out = np.zeros(ids.shape, dtype=np.float64)
    out[:, 1:] = -np.take_along_axis(lp, ids[:, 1:, None], axis=-1)[..., 0]
    return out


def token_nll(logits: Tensor, token_ids, mask) -> Tensor:
    """Masked next-token NLL, averaged per row over supervised tokens, then over rows.

    ``mask[b, t]`` marks token ``t`` as a prediction target. Position 0 is
    never a target because nothing precedes it.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    m = np.asarray(mask, dtype=np.float64)
    if ids.ndim == 1:
        ids, m = ids[None], m[None]
    B, T = ids.shape
    if logits.ndim != 3 or logits.shape[:2] != (B, T) or m.shape != (B, T):
        raise ShapeError("token_nll", f"logits {logits.shape}, ids {ids.shape}, mask {m.shape}")
    weights = m[:, 1:]
    counts = weights.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("every row needs at least one supervised token")
    lp = log_softmax(narrow(logits, 1, 0, T - 1), axis=-1)
    picked = gather_last(lp, ids[:, 1:])
    w = (weights / counts[:, None] / B).astype(logits.dtype)
    return neg(sum_(mul(picked, Tensor(w))))

