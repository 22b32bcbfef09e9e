"""Binary checkpoint container.

Layout (little-endian)::

    magic    8 bytes  b"QLCLSCK\\0"
    version  u32
    count    u32
    count records of:
        name_len u16, name utf-8
        dtype    u8   (see _DTYPES)
        ndim     u8, dims u64 * ndim
        nbytes   u64, raw data

Tensor names are namespaced ``base/``, ``adapter/`` and ``head/``. A record
named ``meta`` holds a UTF-8 JSON object with the model config, LoRA config,
head shape, label names and approach. Files without ``base/`` records are
adapter-only; their base is regenerated from ``model_config.init_seed``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lora import LoraConfig
from .model import ModelConfig, TransformerModel, dense_base_weights
from .objectives import ClassifierHead
from .quantization import QuantizedMatrix

MAGIC = b"QLCLSCK\0"
VERSION = 1

_DTYPES = {1: np.float32, 2: np.float64, 3: np.uint8, 4: np.int64, 5: np.int8}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def write_records(path, records: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        chunks.append(struct.pack("<Q", len(data)) + data)
    Path(path).write_bytes(b"".join(chunks))


def read_records(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off, out = 16, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2 : off + 2 + n].decode("utf-8")
            off += 2 + n
            code, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", buf, off)
            off += 8
            dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
            arr = np.frombuffer(buf[off : off + nbytes], dtype=dtype).reshape(shape)
            out[name] = arr.astype(_DTYPES[code])
            off += nbytes
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return out


@dataclass
class Checkpoint:
    model: TransformerModel
    head: ClassifierHead | None
    meta: dict


def save_checkpoint(path, model: TransformerModel, head: ClassifierHead | None = None, meta: dict | None = None, include_base: bool = True) -> None:
    meta = dict(meta or {})
    meta["model_config"] = model.config.to_dict()
    lc = model.lora_config
    meta["lora"] = None if lc is None else {"rank": lc.rank, "alpha": lc.alpha, "dropout": lc.dropout, "targets": list(lc.targets)}
    meta["head"] = None if head is None else {"n_classes": head.n_classes, "multilabel": head.multilabel}
    records: dict[str, np.ndarray] = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    if include_base:
        for k, v in model.dense_frozen().items():
            records[f"base/{k}"] = v
        for k, q in model.named_quantized().items():
            records[f"base/{k}.codes"] = q.codes
            records[f"base/{k}.scales"] = q.scales
    for k, a in model.named_adapters().items():
        records[f"adapter/{k}.A"] = a.A.data
        records[f"adapter/{k}.B"] = a.B.data
    if head is not None:
        records["head/W"] = head.W.data
        records["head/b"] = head.b.data
    write_records(path, records)


def load_checkpoint(path) -> Checkpoint:
    rec = read_records(path)
    if "meta" not in rec:
        raise CheckpointError(f"{path}: missing meta record")
    meta = json.loads(rec["meta"].tobytes().decode())
    config = ModelConfig(**meta["model_config"])
    if any(k.startswith("base/") for k in rec):
        base = {k[5:]: v for k, v in rec.items() if k.startswith("base/") and not k.endswith((".codes", ".scales"))}
        quantized = {}
        for i in range(config.n_layers):
            for name, (rows, cols) in config.projection_shapes().items():
                key = f"layers.{i}.{name}"
                quantized[key] = QuantizedMatrix(rows, cols, config.block_size, rec[f"base/{key}.codes"], rec[f"base/{key}.scales"])
        model = TransformerModel(config, base=base, quantized=quantized)
    else:
        model = TransformerModel(config, base=dense_base_weights(config))
    if meta.get("lora"):
        lc = meta["lora"]
        model.attach_lora(LoraConfig(lc["rank"], lc["alpha"], lc["dropout"], tuple(lc["targets"])))
        for k, a in model.named_adapters().items():
            a.A.data = rec[f"adapter/{k}.A"].copy()
            a.B.data = rec[f"adapter/{k}.B"].copy()
    head = None
    if meta.get("head"):
        h = meta["head"]
        head = ClassifierHead(h["n_classes"], config.d_model, multilabel=h["multilabel"])
        head.W.data = rec["head/W"].copy()
        head.b.data = rec["head/b"].copy()
    return Checkpoint(model, head, meta)
