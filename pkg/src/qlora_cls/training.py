"""Optimizer, schedules, clipping, early stopping and the two trainer loops."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import save_checkpoint
from .data import DatasetError, DatasetSpec
from .inference import (
    CONSTRAINED,
    FREE,
    EvalResult,
    encode_text,
    evaluate_embedding,
    evaluate_instruction,
    head_forward,
    instruction_loss,
    render,
)
from .lora import LoraConfig
from .model import ModelConfig, TransformerModel
from .objectives import ANSWER_ONLY, FULL_SEQUENCE, ClassifierHead, bce_loss, ce_loss, supervision_mask
from .prompting import VOCAB_SIZE
from .quantization import Quantized8bitState, adamw8bit_pack, adamw8bit_unpack
from .tensor import Tensor, backward

EMBEDDING = "embedding"
INSTRUCTION = "instruction"
CONFIG_FORMAT_VERSION = 1

EMBEDDING_DEFAULTS = dict(
    lr=2e-4,
    weight_decay=0.01,
    max_grad_norm=1.0,
    schedule="linear",
    warmup_ratio=0.0,
    epochs=20,
    accumulation_steps=8,
    batch_size=1,
    eval_batch_size=4,
    patience=2,
    lora_rank=16,
    use_8bit_optimizer=True,
)
INSTRUCTION_DEFAULTS = dict(
    lr=2e-4,
    weight_decay=1e-3,
    max_grad_norm=0.3,
    schedule="cosine",
    warmup_ratio=0.03,
    epochs=5,
    accumulation_steps=8,
    batch_size=1,
    eval_batch_size=1,
    patience=None,
    lora_rank=64,
    use_8bit_optimizer=False,
)


class NonFiniteGradient(FloatingPointError):
    def __init__(self, step: int, name: str = ""):
        super().__init__(f"non-finite gradient at optimizer step {step}" + (f" ({name})" if name else ""))
        self.step = step


@dataclass
class TrainConfig:
    """Flat training configuration; see :meth:`for_approach` for the two default columns."""

    approach: str = EMBEDDING
    lr: float = 2e-4
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    schedule: str = "linear"
    warmup_ratio: float = 0.0
    epochs: int = 20
    accumulation_steps: int = 8
    batch_size: int = 1
    eval_batch_size: int = 4
    patience: int | None = 2
    seed: int = 42
    lora_rank: int = 16
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    lora_targets: tuple = ("q", "k", "v", "o", "up", "down")
    use_8bit_optimizer: bool = True
    threshold: float = 0.5
    mask_mode: str = ANSWER_ONLY
    val_decoding: str = CONSTRAINED
    log_wall_time: bool = False
    # toy base model
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 1024
    block_size: int = 64
    base_seed: int = 0

    def __post_init__(self):
        self.lora_targets = tuple(self.lora_targets)
        if self.approach not in (EMBEDDING, INSTRUCTION):
            raise ValueError(f"approach must be 'embedding' or 'instruction', got {self.approach!r}")
        if self.schedule not in ("linear", "cosine"):
            raise ValueError(f"schedule must be 'linear' or 'cosine', got {self.schedule!r}")
        if self.mask_mode not in (ANSWER_ONLY, FULL_SEQUENCE):
            raise ValueError(f"mask_mode must be {ANSWER_ONLY!r} or {FULL_SEQUENCE!r}")
        if self.val_decoding not in (CONSTRAINED, FREE):
            raise ValueError(f"val_decoding must be {CONSTRAINED!r} or {FREE!r}")
        for name in ("lr", "max_grad_norm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("epochs", "accumulation_steps", "batch_size", "eval_batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.patience is not None and self.patience < 0:
            raise ValueError("patience must be >= 0 or null")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        self.lora  # validates rank, dropout and targets
        self.model_config()

    @classmethod
    def for_approach(cls, approach: str, **overrides) -> "TrainConfig":
        defaults = EMBEDDING_DEFAULTS if approach == EMBEDDING else INSTRUCTION_DEFAULTS
        unknown = sorted(set(overrides) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(approach=approach, **{**defaults, **overrides})

    @property
    def lora(self) -> LoraConfig:
        return LoraConfig(int(self.lora_rank), float(self.lora_alpha), float(self.lora_dropout), self.lora_targets)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=VOCAB_SIZE,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            max_seq_len=self.max_seq_len,
            block_size=self.block_size,
            init_seed=self.base_seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return {"format_version": CONFIG_FORMAT_VERSION, **d}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        version = d.pop("format_version", CONFIG_FORMAT_VERSION)
        if version != CONFIG_FORMAT_VERSION:
            raise ValueError(f"unsupported config format_version {version}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        approach = d.pop("approach", EMBEDDING)
        return cls.for_approach(approach, **d)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        d = json.loads(Path(path).read_text())
        if not isinstance(d, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        d.update(overrides)
        return cls.from_dict(d)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _load(slot, i, like):
    s = slot.get(i)
    if s is None:
        return np.zeros(like.shape, dtype=np.float64)
    if isinstance(s, Quantized8bitState):
        return adamw8bit_unpack(s).astype(np.float64)
    return s


def adamw_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamWState,
    lr_t: float,
    weight_decay: float,
    use_8bit_state: bool = False,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    no_decay: frozenset = frozenset(),
    block_size: int = 256,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``no_decay`` holds positions in ``params`` exempt from weight decay.
    With ``use_8bit_state`` both moments are kept as blockwise 8-bit codes
    between steps.
    """
    step = state.step + 1
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(step, f"parameter {i}")
    state.step = step
    b1, b2 = betas
    c1, c2 = 1.0 - b1**step, 1.0 - b2**step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        m = b1 * _load(state.m, i, p) + (1.0 - b1) * g
        v = b2 * _load(state.v, i, p) + (1.0 - b2) * g * g
        w = p.data.astype(np.float64)
        if weight_decay and i not in no_decay:
            w = w - lr_t * weight_decay * w
        w = w - lr_t * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = w.astype(p.data.dtype)
        if use_8bit_state:
            state.m[i] = adamw8bit_pack(m.astype(np.float32), block_size)
            state.v[i] = adamw8bit_pack(v.astype(np.float32), block_size)
        else:
            state.m[i], state.v[i] = m, v


class AdamW:
    def __init__(self, params: list[Tensor], weight_decay: float, use_8bit_state: bool = False, no_decay=()):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.use_8bit_state = use_8bit_state
        ids = {id(p) for p in no_decay}
        self.no_decay = frozenset(i for i, p in enumerate(self.params) if id(p) in ids)
        self.state = AdamWState()

    def step(self, lr_t: float) -> None:
        adamw_step(
            self.params,
            [p.grad for p in self.params],
            self.state,
            lr_t,
            self.weight_decay,
            self.use_8bit_state,
            no_decay=self.no_decay,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Learning rate for the update taken after ``step`` completed updates."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(config.warmup_ratio * total_steps)
    if step < warmup:
        return config.lr * step / warmup
    span = total_steps - warmup
    if span <= 0:
        return config.lr
    progress = (step - warmup) / span
    if config.schedule == "cosine":
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    return config.lr * (1.0 - progress)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


# --------------------------------------------------------------------------
# early stopping


@dataclass
class EarlyStopState:
    patience: int | None = 2
    best_metric: float = -math.inf
    best_epoch: int = 0
    epochs_since_best: int = 0

    def update(self, metric: float, epoch: int) -> bool:
        """Record an epoch's metric; True when it is a new best (strict improvement)."""
        if metric > self.best_metric:
            self.best_metric, self.best_epoch, self.epochs_since_best = metric, epoch, 0
            return True
        self.epochs_since_best += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.patience is not None and self.epochs_since_best > self.patience


# --------------------------------------------------------------------------
# run bookkeeping


def snapshot_base(model: TransformerModel) -> dict[str, bytes]:
    return model.base_fingerprint()


def audit_frozen_base(model: TransformerModel, snapshot: dict[str, bytes]) -> list[str]:
    """Names of frozen tensors whose bytes differ from ``snapshot``."""
    now = model.base_fingerprint()
    return sorted(k for k in set(snapshot) | set(now) if snapshot.get(k) != now.get(k))


@dataclass
class TrainedRun:
    approach: str
    model: TransformerModel
    head: ClassifierHead | None
    history: list[dict]
    best_epoch: int
    best_metric: float
    final_metric: float
    epochs_run: int
    optimizer_steps: int
    train_samples: int
    train_seconds: float
    best_state: dict = field(default_factory=dict, repr=False)

    @property
    def train_sps(self) -> float:
        return self.train_samples / self.train_seconds if self.train_seconds > 0 else float("nan")


class RunDir:
    """``config.snapshot``, ``metrics.jsonl``, ``checkpoint.best`` and ``throughput.json``."""

    def __init__(self, path, config: TrainConfig, log_wall_time: bool = False):
        self.path = Path(path)
        if self.path.exists() and any(self.path.iterdir()):
            raise FileExistsError(f"run directory {self.path} is not empty; completed runs are immutable")
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / "config.snapshot").write_text(config.to_json())
        self.metrics = self.path / "metrics.jsonl"
        self.metrics.write_text("")
        self.log_wall_time = log_wall_time
        self.t0 = time.perf_counter()

    def log(self, record: dict) -> None:
        if self.log_wall_time:
            record = {**record, "wall_time": time.perf_counter() - self.t0}
        with self.metrics.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def write_json(self, name: str, obj) -> None:
        (self.path / name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _params_state(params: list[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params: list[Tensor], state: list[np.ndarray]) -> None:
    for p, s in zip(params, state):
        p.data = s.copy()


def _schedule(n_examples: int, config: TrainConfig) -> tuple[int, int]:
    micro = math.ceil(n_examples / config.batch_size)
    updates = math.ceil(micro / config.accumulation_steps)
    return micro, updates


def _epoch_groups(order: np.ndarray, config: TrainConfig):
    """Batches of example indices, grouped per optimizer update."""
    batches = [order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)]
    k = config.accumulation_steps
    return [batches[i : i + k] for i in range(0, len(batches), k)]


def _train_loop(
    config: TrainConfig,
    params: list[Tensor],
    no_decay: list[Tensor],
    n_train: int,
    micro_loss: Callable[[np.ndarray], Tensor],
    validate: Callable[[], EvalResult],
    save_best: Callable[[], None] | None,
    run: RunDir | None,
    restore_best: bool,
):
    rng = np.random.default_rng(config.seed)
    opt = AdamW(params, config.weight_decay, config.use_8bit_optimizer, no_decay)
    _, per_epoch = _schedule(n_train, config)
    total = per_epoch * config.epochs
    early = EarlyStopState(config.patience)
    history, best_state = [], _params_state(params)
    step, samples, seconds, final_metric, epoch = 0, 0, 0.0, float("nan"), 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for group in _epoch_groups(rng.permutation(n_train), config):
            opt.zero_grad()
            for batch in group:
                loss = micro_loss(batch)
                # each micro-batch carries 1/len(group) of the update
                backward(loss * (1.0 / len(group)))
                losses.append(float(loss.data))
                samples += len(batch)
            clip_grad_norm(params, config.max_grad_norm)
            lr_t = lr_at(step, total, config)
            opt.step(lr_t)
            step += 1
        seconds += time.perf_counter() - t0
        result = validate()
        final_metric = result.micro_f1
        record = {"epoch": epoch, "split": "val", "lr": lr_at(step, total, config), "train_loss": float(np.mean(losses)), **result.to_record()}
        history.append(record)
        if run is not None:
            run.log(record)
        if early.update(result.micro_f1, epoch):
            best_state = _params_state(params)
            if save_best is not None:
                save_best()
        if early.should_stop:
            break
    if restore_best:
        _restore(params, best_state)
    return history, early, best_state, final_metric, epoch, step, samples, seconds


def train_embedding(
    model: TransformerModel,
    head: ClassifierHead,
    dataset: DatasetSpec,
    config: TrainConfig,
    run_dir=None,
) -> TrainedRun:
    """Adapters plus classification head on the last-token state; best epoch restored."""
    train, val = dataset.split("train"), dataset.split("val")
    if not train or not val:
        raise DatasetError("training needs non-empty train and val splits")
    if model.lora_config is None:
        model.attach_lora(config.lora, seed=config.seed)
    verb = dataset.verbalizer()
    max_len = config.max_seq_len
    seqs = [encode_text(ex.text, max_len) for ex in train]
    targets = dataset.targets("train")
    loss_fn = bce_loss if head.multilabel else ce_loss
    params = model.trainable_parameters() + head.parameters()
    run = RunDir(run_dir, config, config.log_wall_time) if run_dir is not None else None
    snapshot = snapshot_base(model)

    def micro_loss(batch):
        return loss_fn(head_forward(model, head, [seqs[i] for i in batch], training=True), targets[batch])

    def validate():
        return evaluate_embedding(model, head, val, verb, config.eval_batch_size, config.threshold, max_len)

    def save_best():
        if run is not None:
            save_checkpoint(run.path / "checkpoint.best", model, head, _meta(dataset, config), include_base=False)

    history, early, best, final, epochs, steps, samples, seconds = _train_loop(
        config, params, [head.b], len(train), micro_loss, validate, save_best, run, restore_best=True
    )
    _check_audit(model, snapshot)
    out = TrainedRun(EMBEDDING, model, head, history, early.best_epoch, early.best_metric, final, epochs, steps, samples, seconds)
    if run is not None:
        run.write_json("throughput.json", {"train": {"samples": samples, "wall_seconds": seconds, "sps": out.train_sps}})
    return out


def train_instruction(model: TransformerModel, dataset: DatasetSpec, config: TrainConfig, run_dir=None) -> TrainedRun:
    """Adapters trained on answer tokens of rendered prompts; final epoch kept, best saved."""
    train, val = dataset.split("train"), dataset.split("val")
    if not train or not val:
        raise DatasetError("training needs non-empty train and val splits")
    if model.lora_config is None:
        model.attach_lora(config.lora, seed=config.seed)
    verb = dataset.verbalizer()
    multi = dataset.multilabel
    max_len = config.max_seq_len
    rendered = [render(ex.text, verb, multi, list(ex.labels) if multi else ex.labels[0], max_len) for ex in train]
    masks = [supervision_mask(r.prompt_len, len(r.token_ids) - r.prompt_len, config.mask_mode) for r in rendered]
    params = model.trainable_parameters()
    run = RunDir(run_dir, config, config.log_wall_time) if run_dir is not None else None
    snapshot = snapshot_base(model)
    decoding = FREE if multi else config.val_decoding

    def micro_loss(batch):
        return instruction_loss(model, [rendered[i] for i in batch], [masks[i] for i in batch], training=True)

    def validate():
        return evaluate_instruction(model, val, verb, multi, decoding, max_len)

    def save_best():
        if run is not None:
            save_checkpoint(run.path / "checkpoint.best", model, None, _meta(dataset, config), include_base=False)

    history, early, best, final, epochs, steps, samples, seconds = _train_loop(
        config, params, [], len(train), micro_loss, validate, save_best, run, restore_best=False
    )
    _check_audit(model, snapshot)
    out = TrainedRun(INSTRUCTION, model, None, history, early.best_epoch, early.best_metric, final, epochs, steps, samples, seconds, best)
    if run is not None:
        save_checkpoint(run.path / "checkpoint.final", model, None, _meta(dataset, config), include_base=False)
        run.write_json("throughput.json", {"train": {"samples": samples, "wall_seconds": seconds, "sps": out.train_sps}})
    return out


def _meta(dataset: DatasetSpec, config: TrainConfig) -> dict:
    return {"approach": config.approach, "task": dataset.task, "labels": list(dataset.labels), "threshold": config.threshold}


def _check_audit(model: TransformerModel, snapshot: dict[str, bytes]) -> None:
    changed = audit_frozen_base(model, snapshot)
    if changed:
        raise AssertionError(f"frozen base tensors changed during training: {changed}")


def build(dataset: DatasetSpec, config: TrainConfig) -> tuple[TransformerModel, ClassifierHead | None]:
    """Fresh model with adapters attached, plus a head for the embedding approach."""
    model = TransformerModel(config.model_config())
    model.attach_lora(config.lora, seed=config.seed)
    head = None
    if config.approach == EMBEDDING:
        rng = np.random.default_rng(config.seed + 2)
        head = ClassifierHead(len(dataset.labels), config.d_model, rng, multilabel=dataset.multilabel)
    return model, head


def run_training(dataset: DatasetSpec, config: TrainConfig, run_dir=None) -> TrainedRun:
    model, head = build(dataset, config)
    if config.approach == EMBEDDING:
        return train_embedding(model, head, dataset, config, run_dir)
    return train_instruction(model, dataset, config, run_dir)
