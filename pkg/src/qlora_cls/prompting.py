"""Byte tokenizer, prompt templates, verbalizers, answer parsing and decoding."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .model import TransformerModel
from .tensor import Tensor, log_softmax, no_grad

BOS_ID = 256
EOS_ID = 257
PAD_ID = EOS_ID
VOCAB_SIZE = 258


class ByteTokenizer:
    """UTF-8 bytes as ids 0..255, plus BOS and EOS; padding reuses EOS."""

    bos_id = BOS_ID
    eos_id = EOS_ID
    pad_id = PAD_ID
    vocab_size = VOCAB_SIZE

    def encode(self, text, bos: bool = False, eos: bool = False) -> list[int]:
        raw = text if isinstance(text, (bytes, bytearray)) else text.encode("utf-8")
        ids = list(raw)
        if bos:
            ids.insert(0, BOS_ID)
        if eos:
            ids.append(EOS_ID)
        return ids

    def decode_bytes(self, ids) -> bytes:
        return bytes(int(i) for i in ids if int(i) < 256)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")


TOKENIZER = ByteTokenizer()


def _label_id(i: int) -> str:
    # A..Z, then AA, AB, ...
    out = ""
    i += 1
    while i:
        i, r = divmod(i - 1, 26)
        out = chr(ord("A") + r) + out
    return out


class Verbalizer:
    """Bijection between class indices and ``(identifier, name)`` pairs."""

    FORBIDDEN = ("\t", "\n", '"', "\\")

    def __init__(self, names, delimiter: str = ", "):
        names = [str(n) for n in names]
        if not names:
            raise ValueError("a verbalizer needs at least one label")
        if len(set(names)) != len(names):
            raise ValueError("label names must be unique")
        for n in names:
            if not n or n != n.strip():
                raise ValueError(f"label name {n!r} is empty or has surrounding whitespace")
            if delimiter in n or any(c in n for c in self.FORBIDDEN):
                raise ValueError(f"label name {n!r} contains the delimiter or a reserved character")
        self.names = names
        self.ids = [_label_id(i) for i in range(len(names))]
        self.delimiter = delimiter
        self._by_id = {k: i for i, k in enumerate(self.ids)}
        self._by_name = {n: i for i, n in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def index(self, label) -> int:
        if isinstance(label, (int, np.integer)):
            if not 0 <= int(label) < len(self.names):
                raise ValueError(f"class index {label} out of range")
            return int(label)
        try:
            return self._by_name[label]
        except KeyError:
            raise ValueError(f"unknown label {label!r}") from None

    def verbalize(self, index: int) -> str:
        return f"{self.ids[index]}\t{self.names[index]}"

    def choice_set(self) -> str:
        return " ".join(f"{k}:{n}" for k, n in zip(self.ids, self.names))

    def allowed_set(self) -> str:
        return self.delimiter.join(self.names)

    def labels_json(self, bits) -> str:
        chosen = [n for n, b in zip(self.names, bits) if b]
        return json.dumps(chosen, ensure_ascii=False)

    def bits(self, labels) -> np.ndarray:
        out = np.zeros(len(self.names), dtype=np.int8)
        for lab in labels:
            out[self.index(lab)] = 1
        return out


# --------------------------------------------------------------------------
# templates

TEMPLATE_NAMES = ("single_train", "single_test", "multi_train", "multi_test")
_PLACEHOLDER = re.compile(
    r"<(CHOICE_SET|TEXT|GOLD_ID|GOLD_LABEL_NAME|ALLOWED_LABEL_SET|FIRST_ALLOWED_LABEL|GOLD_LABELS_JSON)>"
)


def load_template(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise ValueError(f"unknown template {name!r}")
    return resources.files("qlora_cls").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


_TEMPLATES = {name: load_template(name) for name in TEMPLATE_NAMES}


def fill(template: str, values: dict[str, str]) -> str:
    """Substitute placeholders in one pass so inserted text is never rescanned."""
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)] if m.group(1) in values else m.group(0), template)


@dataclass
class RenderedPrompt:
    text: str
    token_ids: np.ndarray
    prompt_len: int
    answer_span: tuple[int, int] | None = None

    @property
    def answer_text(self) -> str:
        return "" if self.answer_span is None else TOKENIZER.decode(self.token_ids[self.prompt_len :])

    @property
    def prompt_text(self) -> str:
        return TOKENIZER.decode(self.token_ids[1 : self.prompt_len])

    @property
    def prompt_ids(self) -> np.ndarray:
        return self.token_ids[: self.prompt_len]


class ParseFailure(ValueError):
    KINDS = ("malformed", "unknown-id", "id-name-mismatch", "unknown-label")

    def __init__(self, kind: str, detail: str = ""):
        if kind not in self.KINDS:
            raise ValueError(f"unknown parse failure kind {kind!r}")
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind


def _truncate_text(text: str, budget: int) -> str:
    raw = text.encode("utf-8")
    if len(raw) <= budget:
        return text
    return raw[: max(budget, 0)].decode("utf-8", errors="ignore")


def _render(kind: str, values: dict[str, str], text: str, answer: str | None, max_len, reserve: int):
    test_tpl = _TEMPLATES[f"{kind}_test"]
    if max_len is not None:
        scaffold = len(fill(test_tpl, {**values, "TEXT": ""}).encode("utf-8")) + 1
        extra = len(answer.encode("utf-8")) + 1 if answer is not None else reserve
        budget = max_len - scaffold - extra
        if budget < 0:
            raise ValueError(f"max_len {max_len} cannot hold the prompt scaffold")
        text = _truncate_text(text, budget)
    values = {**values, "TEXT": text}
    prompt = fill(test_tpl, values)
    prompt_ids = TOKENIZER.encode(prompt, bos=True)
    if answer is None:
        return RenderedPrompt(prompt, np.array(prompt_ids, dtype=np.int64), len(prompt_ids))
    full = fill(_TEMPLATES[f"{kind}_train"], values)
    if full != prompt + answer:
        raise AssertionError("train template is not the test template followed by the answer")
    ids = prompt_ids + TOKENIZER.encode(answer, eos=True)
    return RenderedPrompt(full, np.array(ids, dtype=np.int64), len(prompt_ids), (len(prompt_ids), len(ids)))


def render_single(text: str, choices: Verbalizer, gold=None, max_len: int | None = None, reserve: int = 0) -> RenderedPrompt:
    """Single-label prompt; with ``gold`` the answer line ``ID<TAB>NAME`` is appended.

    ``max_len`` bounds the token count (BOS, prompt, answer, EOS) by trimming
    the input text only. ``reserve`` keeps room for an answer in test mode.
    """
    values = {"CHOICE_SET": choices.choice_set()}
    answer = None
    if gold is not None:
        g = choices.index(gold)
        values.update(GOLD_ID=choices.ids[g], GOLD_LABEL_NAME=choices.names[g])
        answer = choices.verbalize(g)
    return _render("single", values, text, answer, max_len, reserve)


def render_multi(text: str, allowed: Verbalizer, gold_set=None, max_len: int | None = None, reserve: int = 0) -> RenderedPrompt:
    """Multi-label prompt; gold labels are listed in allowed-set order."""
    values = {"ALLOWED_LABEL_SET": allowed.allowed_set(), "FIRST_ALLOWED_LABEL": allowed.names[0]}
    answer = None
    if gold_set is not None:
        bits = np.asarray(gold_set) if _is_bits(gold_set, allowed) else allowed.bits(gold_set)
        values["GOLD_LABELS_JSON"] = allowed.labels_json(bits)
        answer = " " + values["GOLD_LABELS_JSON"]
    return _render("multi", values, text, answer, max_len, reserve)


def _is_bits(obj, allowed: Verbalizer) -> bool:
    arr = np.asarray(obj)
    return arr.dtype != object and np.issubdtype(arr.dtype, np.integer) and arr.shape == (len(allowed),)


def multi_answer(allowed: Verbalizer, bits) -> str:
    return " " + allowed.labels_json(bits)


# --------------------------------------------------------------------------
# parsing

_SINGLE = re.compile(r"^([^\t\s]+)\t([^\t\n]+)$")


def parse_single(output_text: str, choices: Verbalizer) -> int:
    m = _SINGLE.match(output_text.strip())
    if m is None:
        raise ParseFailure("malformed", repr(output_text))
    label_id, name = m.group(1), m.group(2)
    if label_id not in choices._by_id:
        raise ParseFailure("unknown-id", label_id)
    index = choices._by_id[label_id]
    if choices.names[index] != name:
        raise ParseFailure("id-name-mismatch", f"{label_id} is {choices.names[index]!r}, got {name!r}")
    return index


def parse_multi(output_text: str, allowed: Verbalizer) -> np.ndarray:
    body = output_text.strip()
    if body.startswith("labels:"):
        body = body[len("labels:") :].strip()
    try:
        items = json.loads(body)
    except (json.JSONDecodeError, ValueError):
        raise ParseFailure("malformed", repr(output_text)) from None
    if not isinstance(items, list) or not all(isinstance(x, str) for x in items):
        raise ParseFailure("malformed", "expected a JSON list of strings")
    bits = np.zeros(len(allowed), dtype=np.int8)
    for name in items:
        if name not in allowed._by_name:
            raise ParseFailure("unknown-label", name)
        bits[allowed._by_name[name]] = 1
    return bits


# --------------------------------------------------------------------------
# decoding


def candidate_ids(choices: Verbalizer) -> list[list[int]]:
    """Token sequences of every single-label verbalization, EOS-terminated."""
    return [TOKENIZER.encode(choices.verbalize(i), eos=True) for i in range(len(choices))]


def score_candidates(model: TransformerModel, prompt_ids, candidates) -> np.ndarray:
    """Teacher-forced ``sum_t log p(cand_t | prompt, cand_<t)`` per candidate."""
    prompt = [int(i) for i in prompt_ids]
    if not candidates or any(len(c) == 0 for c in candidates):
        raise ValueError("candidates must be a non-empty list of non-empty sequences")
    longest = len(prompt) + max(len(c) for c in candidates)
    if longest > model.config.max_seq_len:
        raise ValueError(f"prompt plus candidate needs {longest} tokens > max_seq_len {model.config.max_seq_len}")
    P = len(prompt)
    rows = [prompt + list(c) for c in candidates]
    T = max(len(r) for r in rows)
    ids = np.full((len(rows), T), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), T), dtype=np.int8)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = 1
    # only positions P-1 .. T-2 predict candidate tokens
    with no_grad():
        H = model.forward(ids, mask)
        window = Tensor(H.data[:, P - 1 : T - 1])
        lp = log_softmax(model.lm_logits(window), axis=-1).data
    scores = np.zeros(len(rows), dtype=np.float64)
    for i, c in enumerate(candidates):
        picked = lp[i, np.arange(len(c)), np.asarray(c)]
        scores[i] = float(np.sum(picked.astype(np.float64)))
    return scores


def constrained_decode(model: TransformerModel, prompt_ids, candidates) -> int:
    """Index of the highest-scoring candidate; ties go to the lowest index."""
    if len(candidates) == 1:
        if len(candidates[0]) == 0:
            raise ValueError("candidates must be non-empty")
        if len(prompt_ids) + len(candidates[0]) > model.config.max_seq_len:
            raise ValueError("prompt plus candidate exceeds max_seq_len")
        return 0
    return int(np.argmax(score_candidates(model, prompt_ids, candidates)))


def greedy_generate(model: TransformerModel, prompt_ids, max_new_tokens: int = 32, stop_id: int = EOS_ID) -> list[int]:
    """Token-by-token argmax continuation, without a KV cache."""
    ids = [int(i) for i in prompt_ids]
    out: list[int] = []
    with no_grad():
        for _ in range(max_new_tokens):
            if len(ids) >= model.config.max_seq_len:
                break
            H = model.forward(np.array([ids], dtype=np.int64))
            logits = model.lm_logits(Tensor(H.data[:, -1:])).data[0, 0]
            nxt = int(np.argmax(logits))
            if nxt == stop_id:
                break
            out.append(nxt)
            ids.append(nxt)
    return out
