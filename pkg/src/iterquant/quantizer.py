"""Binary-code quantization: 1-bit, greedy k-bit, least-squares refined
scales, and alternating refinement, with per-row multi-table segmentation,
packed bit-plane storage, and the IQQT artifact format.

A weight vector is approximated as sum_i alpha_i * b_i with b_i in {-1,+1}^n.
All algorithms operate on the unmasked (surviving) positions only; masked
positions carry bit +1 by convention and dequantize to zero.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .bitpack import pack_sign_planes, unpack_sign_planes, words_needed
from .errors import (
    DegenerateInputError,
    DimensionError,
    FormatError,
    ValidationError,
)
from .model_io import as_matrix

IQQT_MAGIC = b"IQQT"
IQQT_VERSION = 1

MAX_BITS = 8
METHODS = ("greedy", "refined", "alternating")


@dataclass
class QuantSegment:
    """One quantization table: k scale factors plus k packed bit-planes."""

    k: int
    alphas: np.ndarray          # float64, shape (k,)
    bitplanes: np.ndarray       # uint64, shape (k, words)
    length: int                 # number of weights covered
    sse: float | None = None            # residual SSE over survivors
    ridge_used: bool = False
    sse_history: list[float] | None = None   # alternating trace
    empty: bool = False                 # zero survivors in this segment

    def signs(self) -> np.ndarray:
        """Bit-planes expanded to an int8 (k, length) matrix of +-1."""
        return unpack_sign_planes(self.bitplanes, self.length)

    def dequantized(self) -> np.ndarray:
        return K.dequant_segment(self.alphas, self.signs())


@dataclass
class QuantizedTensor:
    """Per-row segmented quantization of one weight matrix."""

    rows: int
    cols: int
    k: int
    tables_per_row: int
    segments: list[list[QuantSegment]]   # [row][table]
    mask: np.ndarray | None = None       # bool (rows, cols), True = survivor

    def total_sse(self) -> float:
        """Sum of per-segment residual SSE (survivors only)."""
        total = 0.0
        for row_segs in self.segments:
            for seg in row_segs:
                if seg.sse is None:
                    raise ValidationError("segment SSE not available (loaded tensor?)")
                total += seg.sse
        return total

    def empty_segments(self) -> list[tuple[int, int]]:
        return [
            (r, t)
            for r, row_segs in enumerate(self.segments)
            for t, seg in enumerate(row_segs)
            if seg.empty
        ]

    def ridge_segments(self) -> int:
        return sum(seg.ridge_used for row in self.segments for seg in row)


@dataclass
class Codebook:
    """All 2^k representable values sum(+-alpha_i), sorted ascending."""

    values: np.ndarray   # float64 (m,), non-decreasing
    codes: np.ndarray    # uint8 (m,), bit i set = alpha_{i+1} taken positive
    signs: np.ndarray    # int8 (m, k)
    alphas: np.ndarray   # float64 (k,)


def segment_bounds(cols: int, tables_per_row: int) -> list[tuple[int, int]]:
    """Contiguous column ranges [floor(t*cols/T), floor((t+1)*cols/T))."""
    t = tables_per_row
    return [(i * cols // t, (i + 1) * cols // t) for i in range(t)]


def _check_vector_mask(w, mask):
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size == 0:
        raise DimensionError("empty weight vector")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).ravel()
        if mask.size != w.size:
            raise DimensionError(
                f"mask length {mask.size} != weight length {w.size}"
            )
        if not mask.any():
            raise DegenerateInputError("all positions masked")
    return w, mask


def quantize_1bit(w, mask=None) -> tuple[float, np.ndarray]:
    """Optimal single-bit quantization: b = sign(w), alpha = mean |w|.

    Returns (alpha, signs) where signs is int8 in {-1,+1}; masked positions
    get +1 and do not influence alpha.
    """
    w, mask = _check_vector_mask(w, mask)
    sv = w if mask is None else w[mask]
    alphas, signs_sv = K.greedy_quantize(sv, 1)
    b = np.ones(w.size, dtype=np.int8)
    if mask is None:
        b[:] = signs_sv[0]
    else:
        b[mask] = signs_sv[0]
    return float(alphas[0]), b


def _validate_k(k: int) -> None:
    if not 1 <= k <= MAX_BITS:
        raise ValidationError(f"bit count must be in [1, {MAX_BITS}], got {k}")


def _segment_from_signs(k, alphas, signs_sv, mask, length, sse, **extra) -> QuantSegment:
    signs_full = np.ones((k, length), dtype=np.int8)
    if mask is None:
        signs_full[:, :] = signs_sv
    else:
        signs_full[:, mask] = signs_sv
    planes = pack_sign_planes(signs_full)
    return QuantSegment(
        k=k, alphas=np.asarray(alphas, dtype=np.float64), bitplanes=planes,
        length=length, sse=float(sse), **extra,
    )


def quantize_greedy(w, k: int, mask=None) -> QuantSegment:
    """k-bit greedy quantization: each bit fits the previous bits' residue."""
    _validate_k(k)
    w, mask = _check_vector_mask(w, mask)
    sv = w if mask is None else w[mask]
    alphas, signs_sv = K.greedy_quantize(sv, k)
    sse = K.recon_sse(sv, alphas, signs_sv)
    return _segment_from_signs(k, alphas, signs_sv, mask, w.size, sse)


def _refine_on_survivors(signs_sv: np.ndarray, sv: np.ndarray):
    gram, rhs = K.gram_rhs(signs_sv, sv)
    return K.solve_gram(gram, rhs)


def refine_alphas(b_signs, w, mask=None, return_info: bool = False):
    """Re-solve all k scale factors jointly by least squares for fixed signs.

    b_signs is a (k, n) matrix of +-1 (or booleans, True = +1). A singular
    Gram matrix falls back to a tiny ridge term; with return_info=True the
    second element reports whether the fallback fired.
    """
    w, mask = _check_vector_mask(w, mask)
    b = np.asarray(b_signs)
    if b.ndim != 2 or b.shape[1] != w.size:
        raise DimensionError(f"sign matrix shape {b.shape} does not cover {w.size} weights")
    if b.dtype == bool:
        b = np.where(b, 1, -1)
    b = np.ascontiguousarray(b, dtype=np.int8)
    sv = w if mask is None else w[mask]
    b_sv = b if mask is None else np.ascontiguousarray(b[:, mask])
    alphas, ridge = _refine_on_survivors(b_sv, sv)
    if return_info:
        return alphas, {"ridge_used": ridge}
    return alphas


def quantize_refined(w, k: int, mask=None) -> QuantSegment:
    """Greedy sign planes with least-squares re-fitted scale factors."""
    _validate_k(k)
    w, mask = _check_vector_mask(w, mask)
    sv = w if mask is None else w[mask]
    _, signs_sv = K.greedy_quantize(sv, k)
    alphas, ridge = _refine_on_survivors(signs_sv, sv)
    sse = K.recon_sse(sv, alphas, signs_sv)
    return _segment_from_signs(
        k, alphas, signs_sv, mask, w.size, sse, ridge_used=ridge
    )


def build_codebook(alphas) -> Codebook:
    """Enumerate all 2^k sign combinations of the scale factors, sorted.

    Exactly equal values keep the lower lexicographic sign pattern first
    (pattern compared elementwise over (s_1..s_k) with -1 < +1).
    """
    alphas = np.asarray(alphas, dtype=np.float64).ravel()
    k = alphas.size
    _validate_k(k)
    m = 1 << k
    codes = np.arange(m, dtype=np.uint8) if k < 8 else np.arange(m, dtype=np.uint16)
    bits = (codes[:, None] >> np.arange(k)) & 1          # (m, k), bit i = sign of alpha_i
    signs = (bits.astype(np.int8) * 2 - 1)
    values = signs.astype(np.float64) @ alphas
    lexkey = (bits << np.arange(k)[::-1]).sum(axis=1)    # s_1 most significant
    order = np.lexsort((lexkey, values))
    return Codebook(
        values=values[order],
        codes=codes[order].astype(np.uint8),
        signs=np.ascontiguousarray(signs[order]),
        alphas=alphas.copy(),
    )


def nearest_code(cb: Codebook, x: float) -> int:
    """Index of the codebook value nearest to x (binary search).

    Exact midpoint ties resolve to the smaller value; out-of-range inputs
    clamp to the extremes.
    """
    idx = K.assign_codes(np.array([float(x)], dtype=np.float64), cb.values)
    return int(idx[0])


def _alternate_on_survivors(sv, k, tol, max_iters):
    alphas, signs = K.greedy_quantize(sv, k)
    alphas, ridge = _refine_on_survivors(signs, sv)
    sse = K.recon_sse(sv, alphas, signs)
    history = [float(sse)]
    for _ in range(max_iters):
        cb = build_codebook(alphas)
        idx = K.assign_codes(sv, cb.values)
        new_signs = np.ascontiguousarray(cb.signs[idx].T)
        new_alphas, r2 = _refine_on_survivors(new_signs, sv)
        new_sse = K.recon_sse(sv, new_alphas, new_signs)
        if new_sse > sse:
            # possible only through fp noise or ridge; keep the monotone result
            break
        prev = sse
        alphas, signs, sse = new_alphas, new_signs, new_sse
        ridge = ridge or r2
        history.append(float(sse))
        if prev <= 0.0 or (prev - sse) / prev < tol:
            break
    return alphas, signs, sse, history, ridge


def alternating_quantize(
    w, k: int, mask=None, tol: float = 1e-6, max_iters: int = 50
) -> QuantSegment:
    """Alternate the least-squares scale step and the nearest-code sign step
    until the relative SSE improvement drops below tol.

    SSE is non-increasing across alternations and never exceeds the greedy
    starting point.
    """
    _validate_k(k)
    if tol <= 0:
        raise ValidationError("tol must be positive")
    w, mask = _check_vector_mask(w, mask)
    sv = w if mask is None else w[mask]
    alphas, signs_sv, sse, history, ridge = _alternate_on_survivors(
        sv, k, tol, max_iters
    )
    return _segment_from_signs(
        k, alphas, signs_sv, mask, w.size, sse,
        ridge_used=ridge, sse_history=history,
    )


def _empty_segment(k: int, length: int) -> QuantSegment:
    planes = pack_sign_planes(np.ones((k, length), dtype=np.int8))
    return QuantSegment(
        k=k, alphas=np.zeros(k), bitplanes=planes, length=length,
        sse=0.0, empty=True,
    )


def _quantize_segment(seg_w, seg_mask, k, method, tol, max_iters) -> QuantSegment:
    sv = seg_w if seg_mask is None else seg_w[seg_mask]
    if sv.size == 0:
        return _empty_segment(k, seg_w.size)
    if method == "greedy":
        alphas, signs_sv = K.greedy_quantize(sv, k)
        sse = K.recon_sse(sv, alphas, signs_sv)
        extra = {}
    elif method == "refined":
        _, signs_sv = K.greedy_quantize(sv, k)
        alphas, ridge = _refine_on_survivors(signs_sv, sv)
        sse = K.recon_sse(sv, alphas, signs_sv)
        extra = {"ridge_used": ridge}
    else:
        alphas, signs_sv, sse, history, ridge = _alternate_on_survivors(
            sv, k, tol, max_iters
        )
        extra = {"ridge_used": ridge, "sse_history": history}
    return _segment_from_signs(k, alphas, signs_sv, seg_mask, seg_w.size, sse, **extra)


def quantize_tensor(
    m,
    k: int,
    tables_per_row: int = 1,
    mask: np.ndarray | None = None,
    method: str = "alternating",
    tol: float = 1e-6,
    max_iters: int = 50,
    threads: int = 1,
) -> QuantizedTensor:
    """Quantize a matrix row by row, each row split into `tables_per_row`
    contiguous segments quantized independently.

    Rows are independent; `threads` > 1 distributes rows over a thread pool
    without changing the result.
    """
    m = as_matrix(m)
    _validate_k(k)
    rows, cols = m.shape
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}, expected one of {METHODS}")
    if not 1 <= tables_per_row <= cols:
        raise ValidationError(
            f"tables_per_row must be in [1, cols={cols}], got {tables_per_row}"
        )
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != m.shape:
            raise DimensionError(f"mask shape {mask.shape} != matrix shape {m.shape}")
    bounds = segment_bounds(cols, tables_per_row)

    def quantize_row(r: int) -> list[QuantSegment]:
        row = np.ascontiguousarray(m[r])
        row_mask = None if mask is None else mask[r]
        segs = []
        for lo, hi in bounds:
            seg_mask = None if row_mask is None else row_mask[lo:hi]
            segs.append(
                _quantize_segment(row[lo:hi], seg_mask, k, method, tol, max_iters)
            )
        return segs

    if threads > 1 and rows > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            segments = list(pool.map(quantize_row, range(rows)))
    else:
        segments = [quantize_row(r) for r in range(rows)]
    return QuantizedTensor(
        rows=rows, cols=cols, k=k, tables_per_row=tables_per_row,
        segments=segments, mask=None if mask is None else mask.copy(),
    )


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Reconstruct the float64 matrix; masked positions come out as zero."""
    out = np.zeros((q.rows, q.cols), dtype=np.float64)
    bounds = segment_bounds(q.cols, q.tables_per_row)
    for r, row_segs in enumerate(q.segments):
        for (lo, hi), seg in zip(bounds, row_segs):
            out[r, lo:hi] = seg.dequantized()
    if q.mask is not None:
        out[~q.mask] = 0.0
    return out


# ---------------------------------------------------------------------------
# IQQT artifact serialization
# ---------------------------------------------------------------------------

_ALPHA_DTYPES = {"f32": 0, "f16": 1}
_ALPHA_NP = {0: "<f4", 1: "<f2"}


def save_quantized(q: QuantizedTensor, path, alpha_dtype: str = "f32") -> None:
    """Write an IQQT file; byte-exact deterministic for identical input."""
    if alpha_dtype not in _ALPHA_DTYPES:
        raise ValidationError(f"alpha_dtype must be f32 or f16, got {alpha_dtype!r}")
    dt_code = _ALPHA_DTYPES[alpha_dtype]
    np_dt = _ALPHA_NP[dt_code]
    parts = [
        IQQT_MAGIC,
        struct.pack(
            "<IIIBHBB",
            IQQT_VERSION,
            q.rows,
            q.cols,
            q.k,
            q.tables_per_row,
            dt_code,
            1 if q.mask is not None else 0,
        ),
    ]
    for row_segs in q.segments:
        if len(row_segs) != q.tables_per_row:
            raise ValidationError("segment count mismatch in row")
        for seg in row_segs:
            parts.append(seg.alphas.astype(np_dt).tobytes())
            parts.append(np.ascontiguousarray(seg.bitplanes, dtype="<u8").tobytes())
    if q.mask is not None:
        from .bitpack import pack_bits

        parts.append(pack_bits(q.mask.ravel()).astype("<u8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_quantized(path) -> QuantizedTensor:
    """Read an IQQT file. Loaded segments carry no residual-SSE diagnostics."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != IQQT_MAGIC:
        raise FormatError("bad magic, not an IQQT file")
    header = struct.calcsize("<IIIBHBB")
    if len(blob) < 4 + header:
        raise FormatError("truncated file")
    version, rows, cols, k, tables, dt_code, mask_present = struct.unpack(
        "<IIIBHBB", blob[4 : 4 + header]
    )
    if version != IQQT_VERSION:
        raise FormatError(f"unsupported IQQT version {version}")
    if dt_code not in _ALPHA_NP:
        raise FormatError(f"unsupported alpha dtype code {dt_code}")
    np_dt = _ALPHA_NP[dt_code]
    alpha_bytes = np.dtype(np_dt).itemsize
    pos = 4 + header
    bounds = segment_bounds(cols, tables)
    segments = []
    for _ in range(rows):
        row_segs = []
        for lo, hi in bounds:
            length = hi - lo
            words = words_needed(length)
            need = k * alpha_bytes + k * words * 8
            if pos + need > len(blob):
                raise FormatError("truncated file")
            alphas = np.frombuffer(
                blob, dtype=np_dt, count=k, offset=pos
            ).astype(np.float64)
            pos += k * alpha_bytes
            planes = np.frombuffer(
                blob, dtype="<u8", count=k * words, offset=pos
            ).reshape(k, words).copy()
            pos += k * words * 8
            row_segs.append(
                QuantSegment(k=k, alphas=alphas, bitplanes=planes, length=length)
            )
        segments.append(row_segs)
    mask = None
    if mask_present:
        from .bitpack import unpack_bits

        words = words_needed(rows * cols)
        if pos + words * 8 > len(blob):
            raise FormatError("truncated file")
        packed = np.frombuffer(blob, dtype="<u8", count=words, offset=pos)
        pos += words * 8
        mask = unpack_bits(packed, rows * cols).reshape(rows, cols)
    if pos != len(blob):
        raise FormatError("trailing bytes after payload")
    return QuantizedTensor(
        rows=rows, cols=cols, k=k, tables_per_row=tables,
        segments=segments, mask=mask,
    )
