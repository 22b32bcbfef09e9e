"""Datasets: JSONL ingestion and a synthetic keyword corpus."""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .prompting import Verbalizer

SINGLE = "single"
MULTI = "multi"
SPLITS = ("train", "val", "test")

# five storage/networking categories for the single-label stand-in
DEFAULT_SINGLE_LABELS = ("Cloud Storage", "Data Backup", "Edge Security", "Network Fabric", "Storage Arrays")
DEFAULT_MULTI_LABELS = (
    "Adaptive Focus",
    "Artificial Iris",
    "Artificial Silicon Retina (ASR) / Retinal Prostheses",
    "Augmented Reality Devices",
    "Bionic Eye (System)",
    "Cortical Implants",
    "Drug Delivery (Vision-related)",
    "Hand Wearables",
    "Intraocular Lenses (IOL) with Sensors",
    "Intracorneal Lenses",
    "Multifocal",
    "Smart Eyewear",
    "Telescopic Lenses",
    "Virtual Reality Devices",
)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    text: str
    labels: tuple[str, ...]


@dataclass
class DatasetSpec:
    task: str
    labels: list[str]
    train: list[Example]
    val: list[Example]
    test: list[Example]

    def __post_init__(self):
        if self.task not in (SINGLE, MULTI):
            raise DatasetError(f"task must be 'single' or 'multi', got {self.task!r}")
        if len(set(self.labels)) != len(self.labels):
            raise DatasetError("label names must be unique")
        for split in SPLITS:
            if not getattr(self, split):
                raise DatasetError(f"split {split!r} is empty")
        known = set(self.labels)
        for split in SPLITS:
            for ex in getattr(self, split):
                if self.task == SINGLE and len(ex.labels) != 1:
                    raise DatasetError("single-label examples need exactly one gold label")
                bad = set(ex.labels) - known
                if bad:
                    raise DatasetError(f"{split} example has unknown labels {sorted(bad)}")

    @property
    def multilabel(self) -> bool:
        return self.task == MULTI

    def split(self, name: str) -> list[Example]:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}")
        return getattr(self, name)

    def verbalizer(self) -> Verbalizer:
        return Verbalizer(self.labels)

    def targets(self, name: str) -> np.ndarray:
        """Class indices (single) or a bit matrix (multi) for a split."""
        index = {n: i for i, n in enumerate(self.labels)}
        exs = self.split(name)
        if self.task == SINGLE:
            return np.array([index[e.labels[0]] for e in exs], dtype=np.int64)
        out = np.zeros((len(exs), len(self.labels)), dtype=np.int8)
        for r, e in enumerate(exs):
            for lab in e.labels:
                out[r, index[lab]] = 1
        return out


# --------------------------------------------------------------------------
# JSONL


def _parse_line(line: str, where: str, task: str | None):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{where}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise DatasetError(f"{where}: expected a JSON object")
    text = obj.get("text")
    if not isinstance(text, str) or not text:
        raise DatasetError(f"{where}: missing or empty 'text'")
    has_single, has_multi = "label" in obj, "labels" in obj
    if has_single == has_multi:
        raise DatasetError(f"{where}: exactly one of 'label' or 'labels' is required")
    line_task = SINGLE if has_single else MULTI
    if task is not None and line_task != task:
        raise DatasetError(f"{where}: {line_task}-label line in a {task}-label dataset")
    if has_single:
        if not isinstance(obj["label"], str):
            raise DatasetError(f"{where}: 'label' must be a string")
        labels = (obj["label"],)
    else:
        if not isinstance(obj["labels"], list) or not all(isinstance(x, str) for x in obj["labels"]):
            raise DatasetError(f"{where}: 'labels' must be a list of strings")
        labels = tuple(dict.fromkeys(obj["labels"]))
    return Example(text, labels), line_task, obj.get("split")


def read_jsonl(path, task: str | None = None) -> tuple[list[Example], str | None, list]:
    examples, splits = [], []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            ex, line_task, split = _parse_line(line, f"{path}:{n}", task)
            task = task or line_task
            examples.append(ex)
            splits.append(split)
    return examples, task, splits


def load_jsonl(path, task: str | None = None) -> DatasetSpec:
    """Load ``train/val/test.jsonl`` from a directory, or one file with a ``split`` key per line.

    The label set comes from ``labels.json`` when present, otherwise from the
    sorted train labels; evaluation splits may not introduce new labels.
    """
    path = Path(path)
    parts: dict[str, list[Example]] = {}
    if path.is_dir():
        for split in SPLITS:
            f = path / f"{split}.jsonl"
            if not f.exists():
                raise DatasetError(f"missing {f}")
            parts[split], task, _ = read_jsonl(f, task)
    elif path.is_file():
        examples, task, splits = read_jsonl(path, task)
        for i, (ex, split) in enumerate(zip(examples, splits)):
            if split not in SPLITS:
                raise DatasetError(f"{path}: example {i + 1} needs 'split' in {SPLITS}")
            parts.setdefault(split, []).append(ex)
    else:
        raise DatasetError(f"no dataset at {path}")
    if task is None:
        raise DatasetError(f"{path}: no examples")

    meta = path / "labels.json" if path.is_dir() else None
    if meta is not None and meta.exists():
        info = json.loads(meta.read_text(encoding="utf-8"))
        labels = list(info["labels"])
        if info.get("task", task) != task:
            raise DatasetError(f"{meta}: task {info.get('task')!r} disagrees with the data ({task!r})")
    else:
        labels = sorted({lab for ex in parts.get("train", []) for lab in ex.labels})
    known = set(labels)
    for split in ("val", "test"):
        for i, ex in enumerate(parts.get(split, []), start=1):
            unknown = set(ex.labels) - known
            if unknown:
                raise DatasetError(f"{split} example {i}: labels {sorted(unknown)} not seen in train")
    return DatasetSpec(task, labels, parts.get("train", []), parts.get("val", []), parts.get("test", []))


def save_jsonl(dataset: DatasetSpec, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        with open(directory / f"{split}.jsonl", "w", encoding="utf-8") as fh:
            for ex in dataset.split(split):
                if dataset.task == SINGLE:
                    rec = {"text": ex.text, "label": ex.labels[0]}
                else:
                    rec = {"text": ex.text, "labels": list(ex.labels)}
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    (directory / "labels.json").write_text(
        json.dumps({"task": dataset.task, "labels": dataset.labels}, ensure_ascii=False, indent=1) + "\n",
        encoding="utf-8",
    )
    return directory


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticSpec:
    """Keyword corpus whose splits default to the reference benchmark sizes.

    Every label owns a disjoint character pool; its keywords are spelled only
    from that pool, and filler words from a separate shared pool.
    ``noise_rate`` is the chance that a keyword slot draws from a non-gold
    label instead.
    """

    task: str = SINGLE
    n_labels: int | None = None
    label_names: list[str] | None = None
    keywords_per_label: int = 8
    filler_words: int = 40
    keyword_rate: float = 0.3
    noise_rate: float = 0.0
    mean_length: float = 60.0
    min_length: int = 12
    max_length: int = 1024
    max_positives: int = 3
    sizes: tuple[int, int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.task not in (SINGLE, MULTI):
            raise ValueError(f"task must be 'single' or 'multi', got {self.task!r}")
        if self.label_names is None:
            base = DEFAULT_SINGLE_LABELS if self.task == SINGLE else DEFAULT_MULTI_LABELS
            n = self.n_labels or len(base)
            self.label_names = list(base[:n]) if n <= len(base) else [f"label_{i + 1}" for i in range(n)]
        self.label_names = list(self.label_names)
        self.n_labels = len(self.label_names)
        if self.sizes is None:
            self.sizes = (1481, 371, 400) if self.task == SINGLE else (1731, 424, 533)
        self.sizes = tuple(int(s) for s in self.sizes)
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must lie in [0, 1)")
        if any(s < 1 for s in self.sizes) or len(self.sizes) != 3:
            raise ValueError("split sizes must be three positive counts")
        if self.n_labels < 2:
            raise ValueError("need at least two labels")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sizes"] = list(self.sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("sizes") is not None:
            d["sizes"] = tuple(d["sizes"])
        return cls(**d)


@dataclass
class _Vocab:
    keywords: list[list[str]]
    filler: list[str] = field(default_factory=list)


def _build_vocab(spec: SyntheticSpec, rng: np.random.Generator) -> _Vocab:
    alphabet = list(string.ascii_lowercase + string.ascii_uppercase + string.digits)
    rng.shuffle(alphabet)
    per_label = max(2, min(8, (len(alphabet) - 6) // spec.n_labels))
    if per_label * spec.n_labels > len(alphabet) - 2:
        raise ValueError(f"too many labels ({spec.n_labels}) for disjoint character pools")
    pools = [alphabet[i * per_label : (i + 1) * per_label] for i in range(spec.n_labels)]
    filler_pool = alphabet[spec.n_labels * per_label :]

    def words(pool, count):
        out: set[str] = set()
        while len(out) < count:
            n = int(rng.integers(3, 8))
            out.add("".join(rng.choice(pool, size=n)))
        return sorted(out)

    return _Vocab([words(p, spec.keywords_per_label) for p in pools], words(filler_pool, spec.filler_words))


def _sample_example(spec: SyntheticSpec, vocab: _Vocab, rng: np.random.Generator) -> Example:
    C = spec.n_labels
    if spec.task == SINGLE:
        gold = [int(rng.integers(C))]
    else:
        k = int(rng.integers(1, spec.max_positives + 1))
        gold = sorted(rng.choice(C, size=k, replace=False).tolist())
    target = int(min(spec.max_length, max(spec.min_length, rng.geometric(1.0 / spec.mean_length))))
    others = [c for c in range(C) if c not in gold]

    words = [vocab.keywords[g][int(rng.integers(spec.keywords_per_label))] for g in gold]
    while sum(len(w) + 1 for w in words) < target:
        if rng.random() < spec.keyword_rate:
            label = gold[int(rng.integers(len(gold)))]
            if others and rng.random() < spec.noise_rate:
                label = others[int(rng.integers(len(others)))]
            words.append(vocab.keywords[label][int(rng.integers(spec.keywords_per_label))])
        else:
            words.append(vocab.filler[int(rng.integers(len(vocab.filler)))])
    order = rng.permutation(len(words))
    text = " ".join(words[i] for i in order)
    if len(text) > spec.max_length:
        text = text[: spec.max_length].rstrip()
    return Example(text, tuple(spec.label_names[g] for g in gold))


def generate_synthetic(spec: SyntheticSpec) -> DatasetSpec:
    rng = np.random.default_rng(spec.seed)
    vocab = _build_vocab(spec, rng)
    parts = [[_sample_example(spec, vocab, rng) for _ in range(n)] for n in spec.sizes]
    return DatasetSpec(spec.task, list(spec.label_names), *parts)


def synthetic_keywords(spec: SyntheticSpec) -> list[list[str]]:
    """The per-label keyword lists ``generate_synthetic`` uses for ``spec``."""
    return _build_vocab(spec, np.random.default_rng(spec.seed)).keywords
