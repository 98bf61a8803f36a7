import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iterquant.bitpack import (
    pack_bits,
    pack_sign_planes,
    unpack_bits,
    unpack_sign_planes,
    words_needed,
)
from iterquant.errors import DimensionError


class TestPackRoundTrip:
    def test_random_1000_bits(self):
        rng = np.random.default_rng(0)
        bits = rng.random(1000) < 0.5
        packed = pack_bits(bits)
        assert packed.size == words_needed(1000) == 16
        np.testing.assert_array_equal(unpack_bits(packed, 1000), bits)

    def test_exact_word_boundary(self):
        bits = np.ones(64, dtype=bool)
        packed = pack_bits(bits)
        assert packed.size == 1
        assert packed[0] == np.uint64(0xFFFFFFFFFFFFFFFF)

    def test_boundary_plus_one_pads_with_zeros(self):
        bits = np.ones(65, dtype=bool)
        packed = pack_bits(bits)
        assert packed.size == 2
        assert packed[1] == np.uint64(1)  # 63 padding bits are zero

    def test_empty(self):
        assert pack_bits(np.zeros(0, dtype=bool)).size == 0
        assert unpack_bits(np.zeros(0, dtype=np.uint64), 0).size == 0

    @given(st.lists(st.booleans(), min_size=1, max_size=300))
    @settings(max_examples=60, deadline=None)
    def test_roundtrip_property(self, bits):
        arr = np.array(bits, dtype=bool)
        np.testing.assert_array_equal(unpack_bits(pack_bits(arr), arr.size), arr)

    def test_length_mismatch_raises(self):
        packed = pack_bits(np.ones(70, dtype=bool))
        with pytest.raises(DimensionError):
            unpack_bits(packed, 200)


class TestSignPlanes:
    def test_roundtrip(self):
        rng = np.random.default_rng(1)
        signs = np.where(rng.random((3, 130)) < 0.5, 1, -1).astype(np.int8)
        planes = pack_sign_planes(signs)
        assert planes.shape == (3, words_needed(130))
        np.testing.assert_array_equal(unpack_sign_planes(planes, 130), signs)

    def test_bit_one_means_plus(self):
        planes = pack_sign_planes(np.array([[1, -1, 1]], dtype=np.int8))
        assert planes[0, 0] == np.uint64(0b101)
