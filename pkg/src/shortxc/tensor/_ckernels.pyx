# cython: language_level=3
"""Compiled hot kernels. Signatures mirror ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from scipy.linalg.cython_blas cimport daxpy, ddot

cnp.import_array()

from . import _pykernels

BACKEND = "cython"

ctypedef cnp.float64_t f64
ctypedef cnp.int64_t i64


def im2col1d(const f64[:, :, ::1] x, Py_ssize_t width, Py_ssize_t stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t L_out = (L - width) // stride + 1
    out_arr = np.empty((B, L_out, C * width), dtype=np.float64)
    cdef f64[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, t, c, j, base
    with nogil:
        for b in range(B):
            for t in range(L_out):
                base = t * stride
                for c in range(C):
                    for j in range(width):
                        out[b, t, c * width + j] = x[b, c, base + j]
    return out_arr


def col2im1d(const f64[:, :, ::1] dcols, Py_ssize_t channels, Py_ssize_t length,
             Py_ssize_t width, Py_ssize_t stride):
    cdef Py_ssize_t B = dcols.shape[0], L_out = dcols.shape[1]
    dx_arr = np.zeros((B, channels, length), dtype=np.float64)
    cdef f64[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, t, c, j
    # j outermost so accumulation order matches the numpy kernel
    with nogil:
        for b in range(B):
            for j in range(width):
                for c in range(channels):
                    for t in range(L_out):
                        dx[b, c, t * stride + j] += dcols[b, t, c * width + j]
    return dx_arr


def embedding_backward(const i64[::1] ids, const f64[:, ::1] grad, Py_ssize_t num_rows):
    cdef Py_ssize_t N = grad.shape[0], d = grad.shape[1]
    out_arr = np.zeros((num_rows, d), dtype=np.float64)
    cdef f64[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef i64 r
    with nogil:
        for i in range(N):
            r = ids[i]
            if r == 0:
                continue
            for j in range(d):
                out[r, j] += grad[i, j]
    return out_arr


def gather_dot(const f64[:, ::1] g, const f64[:, ::1] W, const f64[::1] bias,
               const i64[:, ::1] idx, const i64[::1] counts):
    cdef Py_ssize_t B = idx.shape[0], C = idx.shape[1], n = g.shape[1]
    out_arr = np.zeros((B, C), dtype=np.float64)
    cdef f64[:, ::1] out = out_arr
    cdef Py_ssize_t b, c
    cdef i64 r
    cdef int nn = <int>n, one = 1
    if n == 0:
        return out_arr
    with nogil:
        for b in range(B):
            for c in range(counts[b]):
                r = idx[b, c]
                out[b, c] = ddot(&nn, &W[r, 0], &one, &g[b, 0], &one) + bias[r]
    return out_arr


def gather_dot_backward(const f64[:, ::1] dz, const f64[:, ::1] g, const f64[:, ::1] W,
                        const i64[:, ::1] idx, const i64[::1] counts):
    cdef Py_ssize_t B = idx.shape[0], n = g.shape[1], L = W.shape[0]
    dg_arr = np.zeros((B, n), dtype=np.float64)
    dW_arr = np.zeros((L, n), dtype=np.float64)
    db_arr = np.zeros(L, dtype=np.float64)
    cdef f64[:, ::1] dg = dg_arr
    cdef f64[:, ::1] dW = dW_arr
    cdef f64[::1] db = db_arr
    cdef Py_ssize_t b, c
    cdef i64 r
    cdef f64 z
    cdef int nn = <int>n, one = 1
    if n == 0:
        return dg_arr, dW_arr, db_arr
    with nogil:
        for b in range(B):
            for c in range(counts[b]):
                r = idx[b, c]
                z = dz[b, c]
                db[r] += z
                daxpy(&nn, &z, &W[r, 0], &one, &dg[b, 0], &one)
                daxpy(&nn, &z, &g[b, 0], &one, &dW[r, 0], &one)
    return dg_arr, dW_arr, db_arr


cdef inline bint _worse(f64 va, i64 ia, f64 vb, i64 ib) noexcept nogil:
    # ranking is by value descending, then index ascending
    return va < vb or (va == vb and ia > ib)


cdef void _sift_down(f64* hv, i64* hx, Py_ssize_t n, Py_ssize_t pos) noexcept nogil:
    cdef Py_ssize_t child, other
    cdef f64 v = hv[pos]
    cdef i64 x = hx[pos]
    while True:
        child = 2 * pos + 1
        if child >= n:
            break
        other = child + 1
        if other < n and _worse(hv[other], hx[other], hv[child], hx[child]):
            child = other
        if not _worse(hv[child], hx[child], v, x):
            break
        hv[pos] = hv[child]
        hx[pos] = hx[child]
        pos = child
    hv[pos] = v
    hx[pos] = x


def topk_rows(const f64[:, ::1] scores, Py_ssize_t k):
    """Per row, the ``k`` best column indices, best first; ties to the lower index.

    A size-k heap keyed on the worst kept entry, so O(M log k) per row. Wide
    rows with a large k go to numpy's introselect, which is faster there.
    """
    cdef Py_ssize_t B = scores.shape[0], M = scores.shape[1]
    if k > M:
        k = M
    if k >= 64 and M >= 4096:
        return _pykernels.topk_rows(np.asarray(scores), k)
    out_arr = np.empty((B, k), dtype=np.int64)
    cdef i64[:, ::1] out = out_arr
    if k == 0:
        return out_arr
    hv_arr = np.empty(k, dtype=np.float64)
    hx_arr = np.empty(k, dtype=np.int64)
    cdef f64[::1] hv = hv_arr
    cdef i64[::1] hx = hx_arr
    cdef Py_ssize_t b, i, n
    cdef f64 v
    with nogil:
        for b in range(B):
            for i in range(k):
                hv[i] = scores[b, i]
                hx[i] = i
            for i in range(k // 2 - 1, -1, -1):
                _sift_down(&hv[0], &hx[0], k, i)
            for i in range(k, M):
                v = scores[b, i]
                # a later index never beats an equal value already kept
                if v > hv[0]:
                    hv[0] = v
                    hx[0] = i
                    _sift_down(&hv[0], &hx[0], k, 0)
            n = k
            while n > 0:
                out[b, n - 1] = hx[0]
                n -= 1
                hv[0] = hv[n]
                hx[0] = hx[n]
                _sift_down(&hv[0], &hx[0], n, 0)
    return out_arr


def csr_row_similarity(const i64[::1] indptr, const i64[::1] indices, const f64[::1] data,
                       const i64[::1] rows, i64 anchor, f64[::1] scratch):
    """``scratch`` is a zeroed buffer of length ncols; it is left zeroed on return."""
    cdef Py_ssize_t n = rows.shape[0], i, p
    out_arr = np.zeros(n, dtype=np.float64)
    cdef f64[::1] out = out_arr
    cdef f64 s
    with nogil:
        for p in range(indptr[anchor], indptr[anchor + 1]):
            scratch[indices[p]] = data[p]
        for i in range(n):
            s = 0.0
            for p in range(indptr[rows[i]], indptr[rows[i] + 1]):
                s += data[p] * scratch[indices[p]]
            out[i] = s
        for p in range(indptr[anchor], indptr[anchor + 1]):
            scratch[indices[p]] = 0.0
    return out_arr


def csr_centroid_scores(const i64[::1] indptr, const i64[::1] indices, const f64[::1] data,
                        const i64[::1] rows, is_left_in, f64[:, ::1] scratch):
    """``scratch`` is a zeroed (3, ncols) buffer; it is left zeroed on return.

    Rows 0/1 accumulate the left/right centroid sums, row 2 marks columns
    already counted in the norms.
    """
    cdef const cnp.npy_bool[::1] is_left = np.ascontiguousarray(is_left_in, dtype=np.bool_)
    cdef Py_ssize_t n = rows.shape[0], i, p, side
    out_arr = np.zeros(n, dtype=np.float64)
    cdef f64[::1] out = out_arr
    cdef f64 nl = 0.0, nr = 0.0, s
    cdef i64 col
    with nogil:
        for i in range(n):
            side = 0 if is_left[i] else 1
            for p in range(indptr[rows[i]], indptr[rows[i] + 1]):
                scratch[side, indices[p]] += data[p]
        for i in range(n):
            for p in range(indptr[rows[i]], indptr[rows[i] + 1]):
                col = indices[p]
                if scratch[2, col] == 0.0:
                    scratch[2, col] = 1.0
                    nl += scratch[0, col] * scratch[0, col]
                    nr += scratch[1, col] * scratch[1, col]
        nl = sqrt(nl)
        nr = sqrt(nr)
        if nl <= 0.0:
            nl = 1.0
        if nr <= 0.0:
            nr = 1.0
        for i in range(n):
            s = 0.0
            for p in range(indptr[rows[i]], indptr[rows[i] + 1]):
                col = indices[p]
                s += data[p] * (scratch[0, col] / nl - scratch[1, col] / nr)
            out[i] = s
        for i in range(n):
            for p in range(indptr[rows[i]], indptr[rows[i] + 1]):
                col = indices[p]
                scratch[0, col] = 0.0
                scratch[1, col] = 0.0
                scratch[2, col] = 0.0
    return out_arr
