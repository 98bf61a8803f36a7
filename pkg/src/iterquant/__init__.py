"""iterquant: iterative binary-code weight quantization with magnitude
pruning and full-precision retraining, plus a desk-scale character-LSTM
trainer to drive the full pipeline."""

__version__ = "0.1.0"

from .model_io import ModelBundle, load_model, save_model, sse
from .pruning import PruneMask, apply_mask, magnitude_prune
from .quantizer import (
    Codebook,
    QuantizedTensor,
    QuantSegment,
    alternating_quantize,
    build_codebook,
    dequantize,
    load_quantized,
    nearest_code,
    quantize_1bit,
    quantize_greedy,
    quantize_refined,
    quantize_tensor,
    refine_alphas,
    save_quantized,
)
from .storage import StorageReport, csr_bits_estimate, storage_report

__all__ = [
    "ModelBundle", "load_model", "save_model", "sse",
    "PruneMask", "apply_mask", "magnitude_prune",
    "Codebook", "QuantizedTensor", "QuantSegment",
    "alternating_quantize", "build_codebook", "dequantize", "load_quantized",
    "nearest_code", "quantize_1bit", "quantize_greedy", "quantize_refined",
    "quantize_tensor", "refine_alphas", "save_quantized",
    "StorageReport", "csr_bits_estimate", "storage_report",
    "__version__",
]
