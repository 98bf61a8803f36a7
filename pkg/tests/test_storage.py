import math

import numpy as np
import pytest

from iterquant.errors import ValidationError
from iterquant.storage import csr_bits_estimate, storage_report

# PTB-small per-layer kernel layout: 400 rows of 800 columns
PTB_ROWS, PTB_COLS = 400, 800


class TestBitsPerWeight:
    def test_point_three_bits_total(self):
        """80% pruning + 1 bit + 0.1 mask bits/weight = 0.3 bits/weight."""
        rep = storage_report(
            PTB_ROWS, PTB_COLS, k=1, tables_per_row=1,
            prune_rate=0.8, mask_bits_per_weight=0.1, alpha_bits=0,
        )
        assert rep.total_bits_per_weight == pytest.approx(0.3)
        assert 2.0 / rep.total_bits_per_weight == pytest.approx(6.6667, rel=1e-3)
        assert rep.compression_vs_float32 == pytest.approx(32.0 / 0.3, rel=1e-12)

    def test_additivity(self):
        rep = storage_report(64, 256, k=3, tables_per_row=4,
                             prune_rate=0.5, mask_bits_per_weight=0.4)
        total = (rep.weight_bits_per_weight + rep.mask_bits_per_weight
                 + rep.alpha_overhead_bits_per_weight)
        assert rep.total_bits_per_weight == pytest.approx(total)

    def test_monotone_in_k_and_mask_bits(self):
        prev = 0.0
        for k in range(1, 7):
            rep = storage_report(10, 100, k, 1, 0.5, 0.2)
            assert rep.total_bits_per_weight >= prev
            prev = rep.total_bits_per_weight
        prev = 0.0
        for mb in (0.05, 0.1, 0.5, 1.0):
            rep = storage_report(10, 100, 1, 1, 0.5, mb)
            assert rep.total_bits_per_weight >= prev
            prev = rep.total_bits_per_weight

    def test_mask_bits_require_pruning(self):
        with pytest.raises(ValidationError):
            storage_report(10, 10, 1, 1, prune_rate=0.0, mask_bits_per_weight=0.1)

    def test_negative_rejected(self):
        with pytest.raises(ValidationError):
            storage_report(10, 10, -1, 1)

    def test_alpha_overhead_flag(self):
        # 1 row of 16 cols, k=1, 16-bit alpha: overhead = 1 bit/weight of 2
        rep = storage_report(1, 16, 1, 1)
        assert rep.alpha_overhead_bits_per_weight == pytest.approx(1.0)
        assert rep.alpha_overhead_flagged
        rep2 = storage_report(PTB_ROWS, PTB_COLS, 1, 1)
        assert not rep2.alpha_overhead_flagged


class TestTableSizes:
    """Table sizes for the 400x800 layout, 16-bit scale values."""

    CASES = [
        # (k, tables, expected_kb)
        (1, 1, 0.78), (2, 1, 1.56), (3, 1, 2.34),
        (1, 2, 1.56), (2, 2, 3.13), (3, 2, 4.69),
        (1, 4, 3.13), (2, 4, 6.25), (3, 4, 9.38),
        (1, 8, 6.25), (2, 8, 12.5), (3, 8, 18.8),
    ]

    @pytest.mark.parametrize("k,tables,expected_kb", CASES)
    def test_table_size_kb(self, k, tables, expected_kb):
        rep = storage_report(PTB_ROWS, PTB_COLS, k, tables, alpha_bits=16)
        got_kb = rep.table_size_bytes / 1024
        assert got_kb == pytest.approx(expected_kb, rel=5e-3)

    def test_payload_size_matches(self):
        # 1-bit payload over 400*800 weights = 39.0625 KB
        bits = PTB_ROWS * PTB_COLS * 1
        assert bits / 8 / 1024 == pytest.approx(39.07, rel=5e-3)


class TestCsrEstimate:
    def test_worse_than_packed_at_80_percent(self):
        index_bits = math.ceil(math.log2(200))
        bpw = csr_bits_estimate(100, 200, 0.8, index_bits, 1)
        assert bpw >= 1.8
        assert bpw > 0.3  # CSR loses to mask-compressed packing

    def test_no_pruning_formula(self):
        rows, cols = 10, 50
        bpw = csr_bits_estimate(rows, cols, 0.0, 6, 1)
        nnz = rows * cols
        ptr = math.ceil(math.log2(nnz + 1))
        expected = (nnz * 7 + (rows + 1) * ptr) / (rows * cols)
        assert bpw == pytest.approx(expected)

    def test_empty_matrix_pointer_only(self):
        rows, cols = 8, 8
        # prune everything except nothing: rate just under 1 prunes all but 0
        bpw = csr_bits_estimate(rows, cols, 1.0, 3, 1)
        assert bpw == pytest.approx((rows + 1) * 1 / (rows * cols))

    def test_zero_size(self):
        assert csr_bits_estimate(0, 0, 0.5, 8, 1) == 0.0
