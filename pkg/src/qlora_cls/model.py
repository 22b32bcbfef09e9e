"""Toy decoder-only transformer over NF4-quantized frozen weights."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .lora import ALL_TARGETS, LoraAdapter, LoraConfig
from .quantization import QuantizedMatrix, quantize_nf4, quantized_linear_forward
from .tensor import (
    Tensor,
    add,
    causal_attention,
    embedding,
    gelu,
    matmul,
    reshape,
    rms_norm,
    row_select,
    transpose,
)

# initialization scales of the frozen random base
EMBED_STD = 0.5
POS_STD = 0.1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 258
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 1024
    block_size: int = 64
    init_seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "block_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def projection_shapes(self) -> dict[str, tuple[int, int]]:
        """(d_out, d_in) of every quantized projection in one layer."""
        d, f = self.d_model, self.d_ff
        return {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "up": (f, d), "down": (d, f)}

    def base_parameter_count(self) -> int:
        d, f = self.d_model, self.d_ff
        per_layer = 4 * d * d + 2 * d * f + 2 * d
        return self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + d


def dense_base_weights(config: ModelConfig) -> dict[str, np.ndarray]:
    """Deterministic float32 base weights for ``config.init_seed``."""
    rng = np.random.default_rng(config.init_seed)
    d = config.d_model
    w = {
        "tok_emb": rng.normal(0.0, EMBED_STD, size=(config.vocab_size, d)),
        "pos_emb": rng.normal(0.0, POS_STD, size=(config.max_seq_len, d)),
        "final_norm": np.ones(d),
    }
    residual_scale = 1.0 / np.sqrt(2 * config.n_layers)
    for i in range(config.n_layers):
        w[f"layers.{i}.attn_norm"] = np.ones(d)
        w[f"layers.{i}.ff_norm"] = np.ones(d)
        for name, (d_out, d_in) in config.projection_shapes().items():
            std = 1.0 / np.sqrt(d_in)
            if name in ("o", "down"):
                std *= residual_scale
            w[f"layers.{i}.{name}"] = rng.normal(0.0, std, size=(d_out, d_in))
    return {k: v.astype(np.float32) for k, v in w.items()}


class QuantizedLinear:
    def __init__(self, q: QuantizedMatrix):
        self.q = q
        self.adapter: LoraAdapter | None = None

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        return quantized_linear_forward(x, self.q, self.adapter, training=training, rng=rng)


class Layer:
    def __init__(self, norms: dict[str, np.ndarray], projections: dict[str, QuantizedMatrix]):
        self.attn_norm = Tensor(norms["attn_norm"])
        self.ff_norm = Tensor(norms["ff_norm"])
        self.proj = {name: QuantizedLinear(q) for name, q in projections.items()}


class TransformerModel:
    """Pre-norm causal transformer; every projection is a frozen NF4 matrix.

    Token embeddings (tied to the LM head), position embeddings and norm
    weights stay dense but are frozen as well. Only LoRA adapters attached
    with :meth:`attach_lora` carry gradients.
    """

    def __init__(self, config: ModelConfig, base: dict[str, np.ndarray] | None = None, quantized=None):
        self.config = config
        if quantized is None:
            base = dense_base_weights(config) if base is None else base
            quantized = {}
            for i in range(config.n_layers):
                for name in config.projection_shapes():
                    key = f"layers.{i}.{name}"
                    quantized[key] = quantize_nf4(base[key], config.block_size)
        self.tok_emb = Tensor(np.array(base["tok_emb"], dtype=np.float32))
        self.pos_emb = Tensor(np.array(base["pos_emb"], dtype=np.float32))
        self.final_norm = Tensor(np.array(base["final_norm"], dtype=np.float32))
        self.layers = []
        for i in range(config.n_layers):
            norms = {n: np.array(base[f"layers.{i}.{n}"], dtype=np.float32) for n in ("attn_norm", "ff_norm")}
            projections = {name: quantized[f"layers.{i}.{name}"] for name in config.projection_shapes()}
            self.layers.append(Layer(norms, projections))
        self.lora_config: LoraConfig | None = None
        self.rng = np.random.default_rng(0)

        counted = self.base_parameter_count()
        expected = config.base_parameter_count()
        if counted != expected:
            raise AssertionError(f"parameter count {counted} != closed form {expected}")

    # -- structure ---------------------------------------------------------

    def named_linears(self):
        for i, layer in enumerate(self.layers):
            for name, lin in layer.proj.items():
                yield f"layers.{i}.{name}", lin

    def named_quantized(self) -> dict[str, QuantizedMatrix]:
        return {key: lin.q for key, lin in self.named_linears()}

    def dense_frozen(self) -> dict[str, np.ndarray]:
        out = {"tok_emb": self.tok_emb.data, "pos_emb": self.pos_emb.data, "final_norm": self.final_norm.data}
        for i, layer in enumerate(self.layers):
            out[f"layers.{i}.attn_norm"] = layer.attn_norm.data
            out[f"layers.{i}.ff_norm"] = layer.ff_norm.data
        return out

    def base_parameter_count(self) -> int:
        dense = sum(a.size for a in self.dense_frozen().values())
        return dense + sum(q.rows * q.cols for q in self.named_quantized().values())

    def attach_lora(self, lora: LoraConfig, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        self.lora_config = lora
        self.rng = np.random.default_rng(seed + 1)
        for key, lin in self.named_linears():
            name = key.rsplit(".", 1)[1]
            if name in lora.targets:
                d_out, d_in = lin.q.shape
                lin.adapter = LoraAdapter(d_in, d_out, lora.rank, lora.alpha, lora.dropout, rng)
            else:
                lin.adapter = None

    def detach_lora(self) -> None:
        self.lora_config = None
        for _, lin in self.named_linears():
            lin.adapter = None

    def named_adapters(self) -> dict[str, LoraAdapter]:
        return {key: lin.adapter for key, lin in self.named_linears() if lin.adapter is not None}

    def adapters(self) -> list[LoraAdapter]:
        return list(self.named_adapters().values())

    def trainable_parameters(self) -> list[Tensor]:
        return [p for a in self.adapters() for p in a.parameters()]

    def base_fingerprint(self) -> dict[str, bytes]:
        fp = {k: q.fingerprint() for k, q in self.named_quantized().items()}
        fp.update({k: v.tobytes() for k, v in self.dense_frozen().items()})
        return fp

    # -- compute -----------------------------------------------------------

    def _check_inputs(self, token_ids, attention_mask):
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ValueError(f"token_ids must be a non-empty [B, T] batch, got shape {ids.shape}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError(f"token id outside vocabulary [0, {self.config.vocab_size})")
        if ids.shape[1] > self.config.max_seq_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        if attention_mask is None:
            mask = np.ones(ids.shape, dtype=bool)
        else:
            mask = np.asarray(attention_mask).astype(bool)
            if mask.ndim == 1:
                mask = mask[None, :]
            if mask.shape != ids.shape:
                raise ValueError(f"attention mask {mask.shape} does not match ids {ids.shape}")
        return ids, mask

    def forward(self, token_ids, attention_mask=None, training: bool = False) -> Tensor:
        """Final-layer (post-norm) hidden states ``[B, T, d]``."""
        ids, mask = self._check_inputs(token_ids, attention_mask)
        B, T = ids.shape
        d, nh = self.config.d_model, self.config.n_heads
        dh = d // nh
        rng = self.rng if training else None
        x = add(embedding(self.tok_emb, ids), Tensor(self.pos_emb.data[:T]))

        def heads(t):
            return transpose(reshape(t, (B, T, nh, dh)), (0, 2, 1, 3))

        for layer in self.layers:
            p = layer.proj
            h = rms_norm(x, layer.attn_norm)
            q = heads(p["q"](h, training, rng))
            k = heads(p["k"](h, training, rng))
            v = heads(p["v"](h, training, rng))
            a = causal_attention(q, k, v, key_mask=mask)
            a = reshape(transpose(a, (0, 2, 1, 3)), (B, T, d))
            x = add(x, p["o"](a, training, rng))
            h = rms_norm(x, layer.ff_norm)
            x = add(x, p["down"](gelu(p["up"](h, training, rng)), training, rng))
        return rms_norm(x, self.final_norm)

    __call__ = forward

    def lm_logits(self, H: Tensor) -> Tensor:
        return matmul(H, transpose(self.tok_emb))


def last_positions(attention_mask) -> np.ndarray:
    mask = np.asarray(attention_mask).astype(bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    if not mask.any(axis=1).all():
        raise ValueError("every row needs at least one unmasked position")
    T = mask.shape[1]
    return T - 1 - np.argmax(mask[:, ::-1], axis=1)


def last_token_state(H: Tensor, attention_mask) -> Tensor:
    """Hidden state at the last unmasked position of each row, ``[B, d]``."""
    return row_select(H, last_positions(attention_mask))


def lm_logits(model: TransformerModel, H: Tensor) -> Tensor:
    return model.lm_logits(H)


__all__ = [
    "ALL_TARGETS",
    "ModelConfig",
    "TransformerModel",
    "dense_base_weights",
    "last_positions",
    "last_token_state",
    "lm_logits",
]
