"""Bitset packing into little-endian 64-bit words.

Bit j of the set lives in word j // 64 at bit position j % 64 (LSB first),
so the byte stream of the word array equals the LSB-first byte packing of
the bits. Padding bits in the last word are always zero.
"""

import numpy as np

from .errors import DimensionError


def words_needed(length: int) -> int:
    """Number of u64 words required for `length` bits."""
    return (length + 63) // 64


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean/0-1 vector into uint64 words, LSB first.

    Returns an array of ceil(len/64) words; unused high bits are zero.
    """
    bits = np.asarray(bits)
    if bits.ndim != 1:
        raise DimensionError("pack_bits expects a 1-D bit vector")
    n = bits.size
    if n == 0:
        return np.zeros(0, dtype=np.uint64)
    padded = np.zeros(words_needed(n) * 64, dtype=np.uint8)
    padded[:n] = bits.astype(bool)
    packed8 = np.packbits(padded, bitorder="little")
    return packed8.view("<u8").copy()


def unpack_bits(words: np.ndarray, length: int) -> np.ndarray:
    """Inverse of pack_bits; returns a bool array of exactly `length` bits."""
    words = np.ascontiguousarray(words, dtype="<u8")
    if length < 0 or words.size != words_needed(length):
        raise DimensionError(
            f"word count {words.size} does not match bit length {length}"
        )
    if length == 0:
        return np.zeros(0, dtype=bool)
    bits = np.unpackbits(words.view(np.uint8), bitorder="little")
    return bits[:length].astype(bool)


def pack_sign_planes(signs: np.ndarray) -> np.ndarray:
    """Pack a (k, n) matrix of +-1 signs into a (k, words) uint64 array.

    Bit value 1 encodes sign +1.
    """
    signs = np.asarray(signs)
    if signs.ndim != 2:
        raise DimensionError("pack_sign_planes expects a (k, n) sign matrix")
    k, n = signs.shape
    out = np.zeros((k, words_needed(n)), dtype=np.uint64)
    for i in range(k):
        out[i] = pack_bits(signs[i] > 0)
    return out


def unpack_sign_planes(words: np.ndarray, length: int) -> np.ndarray:
    """Inverse of pack_sign_planes; returns int8 signs in {-1, +1}."""
    words = np.asarray(words)
    if words.ndim != 2:
        raise DimensionError("unpack_sign_planes expects a (k, words) array")
    k = words.shape[0]
    out = np.empty((k, length), dtype=np.int8)
    for i in range(k):
        bits = unpack_bits(words[i], length)
        out[i] = np.where(bits, 1, -1).astype(np.int8)
    return out
