"""QLoRA-style text classification on a toy quantized transformer."""

from .lora import LoraAdapter, LoraConfig
from .model import ModelConfig, TransformerModel
from .objectives import ClassifierHead
from .quantization import QuantizedMatrix, dequantize_nf4, quantize_nf4

__version__ = "0.1.0"

__all__ = [
    "ClassifierHead",
    "LoraAdapter",
    "LoraConfig",
    "ModelConfig",
    "QuantizedMatrix",
    "TransformerModel",
    "dequantize_nf4",
    "quantize_nf4",
]
