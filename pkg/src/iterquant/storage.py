"""Bits-per-weight accounting for pruned, quantized weight storage.

Mask compression is modeled as a bits-per-weight parameter (a Viterbi-style
index compressor reaches ~0.1 bits/weight at 80% pruning; a raw bitmask
costs 1.0). The quantization-table overhead is reported even when small and
flagged once it exceeds 5% of the total.
"""

import math
from dataclasses import dataclass

from .errors import ValidationError

ALPHA_OVERHEAD_FLAG_FRACTION = 0.05


@dataclass
class StorageReport:
    weight_bits_per_weight: float
    mask_bits_per_weight: float
    alpha_overhead_bits_per_weight: float
    total_bits_per_weight: float
    compression_vs_float32: float
    table_size_bytes: float
    alpha_overhead_flagged: bool

    def as_dict(self) -> dict:
        return {
            "weight_bits_per_weight": self.weight_bits_per_weight,
            "mask_bits_per_weight": self.mask_bits_per_weight,
            "alpha_overhead_bits_per_weight": self.alpha_overhead_bits_per_weight,
            "total_bits_per_weight": self.total_bits_per_weight,
            "compression_vs_float32": self.compression_vs_float32,
            "table_size_bytes": self.table_size_bytes,
            "alpha_overhead_flagged": self.alpha_overhead_flagged,
        }

    def text_block(self) -> str:
        lines = [
            f"weight_bits_per_weight  {self.weight_bits_per_weight:.6g}",
            f"mask_bits_per_weight    {self.mask_bits_per_weight:.6g}",
            f"alpha_bits_per_weight   {self.alpha_overhead_bits_per_weight:.6g}",
            f"total_bits_per_weight   {self.total_bits_per_weight:.6g}",
            f"compression_vs_float32  {self.compression_vs_float32:.4g}x",
            f"table_size_bytes        {self.table_size_bytes:.6g}"
            f" ({self.table_size_bytes / 1024:.3g} KB)",
        ]
        if self.alpha_overhead_flagged:
            lines.append("note: quantization-table overhead exceeds 5% of total")
        return "\n".join(lines)


def storage_report(
    rows: int,
    cols: int,
    k: int,
    tables_per_row: int = 1,
    prune_rate: float = 0.0,
    mask_bits_per_weight: float = 0.0,
    alpha_bits: int = 16,
) -> StorageReport:
    """Account total storage in bits per weight.

    weight payload: (1 - prune_rate) * k
    mask: the given bits/weight (0 when nothing is pruned)
    tables: rows * tables_per_row * k scale values of alpha_bits each,
    spread over rows * cols weights.
    """
    for name, v in (
        ("rows", rows), ("cols", cols), ("k", k),
        ("tables_per_row", tables_per_row), ("prune_rate", prune_rate),
        ("mask_bits_per_weight", mask_bits_per_weight), ("alpha_bits", alpha_bits),
    ):
        if v < 0:
            raise ValidationError(f"{name} must be nonnegative, got {v}")
    if prune_rate == 0.0 and mask_bits_per_weight != 0.0:
        raise ValidationError("mask_bits_per_weight must be 0 when prune_rate is 0")
    weight = (1.0 - prune_rate) * k
    n_alphas = rows * tables_per_row * k
    n_weights = rows * cols
    alpha_overhead = (n_alphas * alpha_bits / n_weights) if n_weights else 0.0
    total = weight + mask_bits_per_weight + alpha_overhead
    compression = 32.0 / total if total > 0 else math.inf
    flagged = total > 0 and alpha_overhead > ALPHA_OVERHEAD_FLAG_FRACTION * total
    return StorageReport(
        weight_bits_per_weight=weight,
        mask_bits_per_weight=mask_bits_per_weight,
        alpha_overhead_bits_per_weight=alpha_overhead,
        total_bits_per_weight=total,
        compression_vs_float32=compression,
        table_size_bytes=n_alphas * alpha_bits / 8.0,
        alpha_overhead_flagged=flagged,
    )


def csr_bits_estimate(
    rows: int,
    cols: int,
    prune_rate: float,
    index_bits: int,
    value_bits: int,
) -> float:
    """Bits per weight for compressed-sparse-row storage of the survivors.

    nnz * (index_bits + value_bits) plus (rows + 1) row pointers of
    ceil(log2(nnz + 1)) bits each (at least 1), normalized per weight.
    """
    n = rows * cols
    if n == 0:
        return 0.0
    nnz = n - int(math.ceil(prune_rate * n))
    ptr_bits = max(1, math.ceil(math.log2(nnz + 1)))
    total = nnz * (index_bits + value_bits) + (rows + 1) * ptr_bits
    return total / n
