"""Running a model over dataset splits: batching, prediction and scored evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Example
from .evaluation import expected_calibration_error, micro_f1
from .model import TransformerModel, last_token_state
from .objectives import ClassifierHead, predict_multilabel, token_nll
from .prompting import (
    PAD_ID,
    TOKENIZER,
    ParseFailure,
    Verbalizer,
    candidate_ids,
    greedy_generate,
    parse_multi,
    parse_single,
    render_multi,
    render_single,
    score_candidates,
)
from .tensor import Tensor, narrow, no_grad

CONSTRAINED = "constrained"
FREE = "free"


def encode_text(text: str, max_len: int) -> list[int]:
    """``[BOS] + utf-8 bytes + [EOS]``, trimming bytes to fit ``max_len``."""
    if max_len < 3:
        raise ValueError("max_len must leave room for BOS, one byte and EOS")
    body = TOKENIZER.encode(text)[: max_len - 2]
    return [TOKENIZER.bos_id] + body + [TOKENIZER.eos_id]


def pad_batch(seqs, pad_id: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence; returns ``(ids, mask)``."""
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=np.int8)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1
    return ids, mask


def head_forward(model: TransformerModel, head: ClassifierHead, seqs, training: bool = False) -> Tensor:
    ids, mask = pad_batch(seqs)
    H = model.forward(ids, mask, training=training)
    return head(last_token_state(H, mask))


def instruction_loss(model: TransformerModel, rendered, mask_rows, training: bool = False) -> Tensor:
    """Masked next-token NLL over a right-padded batch of train-mode prompts.

    Only the window that contains supervised targets goes through the LM head.
    """
    seqs = [r.token_ids for r in rendered]
    ids, attn = pad_batch(seqs)
    m = np.zeros(ids.shape, dtype=np.int8)
    for i, row in enumerate(mask_rows):
        m[i, : len(row)] = row
    targets = np.nonzero(m[:, 1:].any(axis=0))[0] + 1
    lo, hi = int(targets.min()), int(targets.max()) + 1
    H = model.forward(ids, attn, training=training)
    logits = model.lm_logits(narrow(H, 1, lo - 1, hi))
    return token_nll(logits, ids[:, lo - 1 : hi], m[:, lo - 1 : hi])


@dataclass
class EvalResult:
    micro_f1: float
    loss: float
    n: int
    predictions: list = field(repr=False)
    parse_failures: int = 0
    ece: float | None = None

    @property
    def parse_failure_rate(self) -> float:
        return self.parse_failures / self.n if self.n else 0.0

    def to_record(self) -> dict:
        out = {"micro_f1": self.micro_f1, "loss": self.loss, "n": self.n, "parse_failure_rate": self.parse_failure_rate}
        if self.ece is not None:
            out["ece"] = self.ece
        return out


def _gold(examples: list[Example], verbalizer: Verbalizer, multilabel: bool):
    if multilabel:
        return [verbalizer.bits(ex.labels) for ex in examples]
    return [verbalizer.index(ex.labels[0]) for ex in examples]


def evaluate_embedding(
    model: TransformerModel,
    head: ClassifierHead,
    examples: list[Example],
    verbalizer: Verbalizer,
    batch_size: int = 4,
    threshold: float = 0.5,
    max_len: int | None = None,
) -> EvalResult:
    max_len = max_len or model.config.max_seq_len
    gold = _gold(examples, verbalizer, head.multilabel)
    logits = []
    with no_grad():
        for i in range(0, len(examples), batch_size):
            seqs = [encode_text(ex.text, max_len) for ex in examples[i : i + batch_size]]
            logits.append(head_forward(model, head, seqs).data.astype(np.float64))
    z = np.concatenate(logits)
    if head.multilabel:
        y = np.stack(gold).astype(np.float64)
        # summed per-label BCE, averaged over examples
        loss = float(np.mean(np.sum(np.logaddexp(0, z) - y * z, axis=1)))
        preds = list(predict_multilabel(z, threshold))
        p = 1.0 / (1.0 + np.exp(-z))
        # per-label probability against the label's empirical frequency
        ece = expected_calibration_error(p.ravel(), y.ravel()).ece
    else:
        lse = np.logaddexp.reduce(z, axis=1)
        y = np.asarray(gold)
        loss = float(np.mean(lse - z[np.arange(len(y)), y]))
        preds = [int(k) for k in np.argmax(z, axis=1)]
        conf = np.exp(z.max(axis=1) - lse)
        ece = expected_calibration_error(conf, np.asarray(preds) == y).ece
    return EvalResult(micro_f1(preds, gold, len(verbalizer)), loss, len(examples), preds, 0, ece)


def render(text: str, verbalizer: Verbalizer, multilabel: bool, gold=None, max_len=None, reserve: int = 0):
    fn = render_multi if multilabel else render_single
    return fn(text, verbalizer, gold, max_len=max_len, reserve=reserve)


def answer_budget(verbalizer: Verbalizer, multilabel: bool) -> int:
    """Token room kept free for the answer when rendering test-mode prompts."""
    if multilabel:
        return len(TOKENIZER.encode(" " + verbalizer.labels_json(np.ones(len(verbalizer), dtype=np.int8)))) + 1
    return max(len(c) for c in candidate_ids(verbalizer))


def _nll_of_gold(model, text, verbalizer, multilabel, gold, max_len) -> float:
    r = render(text, verbalizer, multilabel, gold, max_len)
    m = np.zeros(len(r.token_ids), dtype=np.int8)
    m[r.answer_span[0] : r.answer_span[1]] = 1
    with no_grad():
        return float(instruction_loss(model, [r], [m]).data)


def predict_instruction(
    model: TransformerModel,
    text: str,
    verbalizer: Verbalizer,
    multilabel: bool,
    decoding: str = CONSTRAINED,
    max_len: int | None = None,
    max_new_tokens: int | None = None,
):
    """One prediction; returns ``(prediction or None, raw output text, candidate scores or None)``."""
    max_len = max_len or model.config.max_seq_len
    budget = answer_budget(verbalizer, multilabel)
    prompt = render(text, verbalizer, multilabel, max_len=max_len, reserve=budget)
    if decoding == CONSTRAINED:
        if multilabel:
            raise ValueError("constrained decoding is defined for single-label tasks only; use --decoding free")
        cands = candidate_ids(verbalizer)
        scores = score_candidates(model, prompt.prompt_ids, cands)
        k = int(np.argmax(scores))
        return k, verbalizer.verbalize(k), scores
    if decoding != FREE:
        raise ValueError(f"unknown decoding mode {decoding!r}")
    room = max_len - len(prompt.prompt_ids)
    out = greedy_generate(model, prompt.prompt_ids, min(max_new_tokens or budget, room))
    raw = TOKENIZER.decode(out)
    try:
        pred = parse_multi(raw, verbalizer) if multilabel else parse_single(raw, verbalizer)
    except ParseFailure:
        pred = None
    return pred, raw, None


def evaluate_instruction(
    model: TransformerModel,
    examples: list[Example],
    verbalizer: Verbalizer,
    multilabel: bool,
    decoding: str = CONSTRAINED,
    max_len: int | None = None,
    max_new_tokens: int | None = None,
) -> EvalResult:
    max_len = max_len or model.config.max_seq_len
    gold = _gold(examples, verbalizer, multilabel)
    preds, losses, failures, conf, correct = [], [], 0, [], []
    for ex, g in zip(examples, gold):
        pred, _, scores = predict_instruction(model, ex.text, verbalizer, multilabel, decoding, max_len, max_new_tokens)
        if scores is not None:
            # mean NLL over the gold answer tokens, read off the candidate scores
            losses.append(-scores[g] / len(candidate_ids(verbalizer)[g]))
            p = np.exp(scores - np.logaddexp.reduce(scores))
            conf.append(float(p.max()))
            correct.append(pred == g)
        else:
            gold_arg = list(ex.labels) if multilabel else ex.labels[0]
            losses.append(_nll_of_gold(model, ex.text, verbalizer, multilabel, gold_arg, max_len))
        if pred is None:
            failures += 1
        preds.append(pred)
    ece = expected_calibration_error(conf, correct).ece if conf else None
    return EvalResult(micro_f1(preds, gold, len(verbalizer)), float(np.mean(losses)), len(examples), preds, failures, ece)
