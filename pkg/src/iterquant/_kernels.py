"""Hot numeric kernels behind the quantizer, in two interchangeable backends.

Each kernel exists as a loop implementation (compiled with numba @njit when
available) and a vectorized pure-numpy fallback. The active backend is
chosen at import time: numba when importable, unless ITERQUANT_NUMBA=0
forces the numpy path. Both backends stay importable so they can be
benchmarked and cross-checked against each other (benchmarks/bench_kernels.py,
tests/test_kernels.py).

Sign convention everywhere: sign(0) = +1, bit value 1 encodes +1.
"""

import os

import numpy as np


def _env_numba_enabled() -> bool:
    val = os.environ.get("ITERQUANT_NUMBA", "1").strip().lower()
    return val not in ("0", "false", "off", "no")


# ---------------------------------------------------------------------------
# loop implementations (numba-compilable, also valid plain Python)
# ---------------------------------------------------------------------------


def _greedy_quantize_loops(values, k):
    n = values.size
    alphas = np.zeros(k, dtype=np.float64)
    signs = np.empty((k, n), dtype=np.int8)
    resid = values.copy()
    for i in range(k):
        acc = 0.0
        for j in range(n):
            if resid[j] >= 0.0:
                signs[i, j] = 1
                acc += resid[j]
            else:
                signs[i, j] = -1
                acc -= resid[j]
        a = acc / n
        alphas[i] = a
        for j in range(n):
            resid[j] -= a * signs[i, j]
    return alphas, signs


def _gram_rhs_loops(signs, values):
    k, n = signs.shape
    gram = np.zeros((k, k), dtype=np.float64)
    rhs = np.zeros(k, dtype=np.float64)
    for i in range(k):
        for j in range(i, k):
            acc = 0.0
            for t in range(n):
                acc += float(signs[i, t]) * float(signs[j, t])
            gram[i, j] = acc
            gram[j, i] = acc
        accr = 0.0
        for t in range(n):
            accr += signs[i, t] * values[t]
        rhs[i] = accr
    return gram, rhs


def _assign_codes_loops(values, cb_values):
    n = values.size
    m = cb_values.size
    idx = np.empty(n, dtype=np.int64)
    for j in range(n):
        x = values[j]
        lo = 0
        hi = m
        while lo < hi:  # first position with cb_values[pos] >= x
            mid = (lo + hi) // 2
            if cb_values[mid] < x:
                lo = mid + 1
            else:
                hi = mid
        if lo == 0:
            idx[j] = 0
        elif lo == m:
            idx[j] = m - 1
        else:
            dl = x - cb_values[lo - 1]
            dr = cb_values[lo] - x
            # exact midpoint resolves to the smaller value
            idx[j] = lo - 1 if dl <= dr else lo
    return idx


def _recon_sse_loops(values, alphas, signs):
    k, n = signs.shape
    acc = 0.0
    for j in range(n):
        v = values[j]
        for i in range(k):
            v -= alphas[i] * signs[i, j]
        acc += v * v
    return acc


def _dequant_segment_loops(alphas, signs):
    k, n = signs.shape
    out = np.zeros(n, dtype=np.float64)
    for j in range(n):
        acc = 0.0
        for i in range(k):
            acc += alphas[i] * signs[i, j]
        out[j] = acc
    return out


# ---------------------------------------------------------------------------
# vectorized numpy fallbacks
# ---------------------------------------------------------------------------


def greedy_quantize_np(values, k):
    n = values.size
    alphas = np.zeros(k, dtype=np.float64)
    signs = np.empty((k, n), dtype=np.int8)
    resid = values.astype(np.float64, copy=True)
    for i in range(k):
        s = np.where(resid >= 0.0, 1, -1).astype(np.int8)
        a = float(np.abs(resid).sum()) / n
        signs[i] = s
        alphas[i] = a
        resid -= a * s
    return alphas, signs


def gram_rhs_np(signs, values):
    sf = signs.astype(np.float64)
    return sf @ sf.T, sf @ values


def assign_codes_np(values, cb_values):
    m = cb_values.size
    pos = np.searchsorted(cb_values, values, side="left")
    left = np.clip(pos - 1, 0, m - 1)
    right = np.clip(pos, 0, m - 1)
    dl = values - cb_values[left]
    dr = cb_values[right] - values
    take_left = (dl <= dr) & (pos > 0)
    return np.where(take_left, left, right).astype(np.int64)


def recon_sse_np(values, alphas, signs):
    r = values - alphas @ signs.astype(np.float64)
    return float(np.dot(r, r))


def dequant_segment_np(alphas, signs):
    return alphas @ signs.astype(np.float64)


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, belt and braces
    HAS_NUMBA = False

if HAS_NUMBA:
    _jit = njit(cache=True, nogil=True)
    greedy_quantize_nb = _jit(_greedy_quantize_loops)
    gram_rhs_nb = _jit(_gram_rhs_loops)
    assign_codes_nb = _jit(_assign_codes_loops)
    recon_sse_nb = _jit(_recon_sse_loops)
    dequant_segment_nb = _jit(_dequant_segment_loops)

USE_NUMBA = HAS_NUMBA and _env_numba_enabled()
BACKEND = "numba" if USE_NUMBA else "numpy"

if USE_NUMBA:
    greedy_quantize = greedy_quantize_nb
    gram_rhs = gram_rhs_nb
    assign_codes = assign_codes_nb
    recon_sse = recon_sse_nb
    dequant_segment = dequant_segment_nb
else:
    greedy_quantize = greedy_quantize_np
    gram_rhs = gram_rhs_np
    assign_codes = assign_codes_np
    recon_sse = recon_sse_np
    dequant_segment = dequant_segment_np


# ---------------------------------------------------------------------------
# small shared solver (k <= 8, cheap enough to stay in plain Python)
# ---------------------------------------------------------------------------


def solve_gram(gram: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, bool]:
    """Solve gram @ x = rhs by Gaussian elimination with partial pivoting.

    A pivot below max|gram| * 1e-12 marks the system singular; the solve is
    then retried with a ridge term 1e-10 * trace(gram) on the diagonal and
    the returned flag is True. Identical arithmetic on both kernel backends.
    """
    x, ok = _eliminate(gram, rhs)
    if ok:
        return x, False
    lam = 1e-10 * float(np.trace(gram))
    ridged = gram + lam * np.eye(gram.shape[0])
    x2, ok2 = _eliminate(ridged, rhs)
    if not ok2:
        raise ArithmeticError("ridge-regularized Gram solve failed")
    return x2, True


def _eliminate(gram, rhs):
    k = gram.shape[0]
    a = np.empty((k, k + 1), dtype=np.float64)
    a[:, :k] = gram
    a[:, k] = rhs
    tol = float(np.max(np.abs(gram))) * 1e-12
    for col in range(k):
        p = col
        pval = abs(a[col, col])
        for r in range(col + 1, k):
            v = abs(a[r, col])
            if v > pval:
                pval = v
                p = r
        if pval <= tol:
            return np.zeros(k), False
        if p != col:
            a[[col, p]] = a[[p, col]]
        piv = a[col, col]
        for r in range(col + 1, k):
            f = a[r, col] / piv
            if f != 0.0:
                a[r, col:] -= f * a[col, col:]
    x = np.zeros(k, dtype=np.float64)
    for r in range(k - 1, -1, -1):
        x[r] = (a[r, k] - float(np.dot(a[r, r + 1 : k], x[r + 1 :]))) / a[r, r]
    return x, True
