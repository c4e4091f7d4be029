"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature. Inputs are float64 / int64 arrays; callers handle dtype casts.
"""
import numpy as np

BACKEND = "numpy"


def im2col1d(x, width, stride):
    """(B, C, L) -> (B, L_out, C*width) with cols[b, t, c*width + j] = x[b, c, t*stride + j]."""
    B, C, L = x.shape
    L_out = (L - width) // stride + 1
    sb, sc, sl = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, shape=(B, L_out, C, width), strides=(sb, sl * stride, sc, sl), writeable=False
    )
    return np.ascontiguousarray(win).reshape(B, L_out, C * width)


def col2im1d(dcols, channels, length, width, stride):
    B, L_out, _ = dcols.shape
    d = dcols.reshape(B, L_out, channels, width)
    dx = np.zeros((B, channels, length), dtype=np.float64)
    stop = stride * (L_out - 1) + 1
    for j in range(width):
        dx[:, :, j : j + stop : stride] += d[:, :, :, j].transpose(0, 2, 1)
    return dx


def embedding_backward(ids, grad, num_rows):
    """Scatter-add ``grad`` rows into a (num_rows, d) table; row 0 (PAD) is skipped."""
    out = np.zeros((num_rows, grad.shape[1]), dtype=np.float64)
    keep = ids != 0
    np.add.at(out, ids[keep], grad[keep])
    return out


def gather_dot(g, W, bias, idx, counts):
    B, C = idx.shape
    out = np.zeros((B, C), dtype=np.float64)
    for b in range(B):
        n = counts[b]
        if n:
            rows = idx[b, :n]
            out[b, :n] = W[rows] @ g[b] + bias[rows]
    return out


def gather_dot_backward(dz, g, W, idx, counts):
    B, C = idx.shape
    dg = np.zeros_like(g)
    dW = np.zeros_like(W)
    db = np.zeros(W.shape[0], dtype=np.float64)
    for b in range(B):
        n = counts[b]
        if n:
            rows = idx[b, :n]
            z = dz[b, :n]
            dg[b] = z @ W[rows]
            # rows are unique within an instance, so fancy-index += is exact
            dW[rows] += np.outer(z, g[b])
            db[rows] += z
    return dg, dW, db


def topk_rows(scores, k):
    """Indices of the k largest entries per row, descending; ties go to the lower index."""
    B, M = scores.shape
    k = min(k, M)
    out = np.empty((B, k), dtype=np.int64)
    for b in range(B):
        row = scores[b]
        if k < M:
            thresh = np.partition(row, M - k)[M - k]
            cand = np.flatnonzero(row >= thresh)
        else:
            cand = np.arange(M)
        order = np.argsort(-row[cand], kind="stable")
        out[b] = cand[order[:k]]
    return out


def _local_block(indptr, indices, data, rows):
    starts = indptr[rows]
    lens = indptr[rows + 1] - starts
    pos = np.repeat(starts - np.cumsum(np.r_[0, lens[:-1]]), lens) + np.arange(lens.sum())
    owner = np.repeat(np.arange(len(rows)), lens)
    cols = indices[pos]
    uniq, local = np.unique(cols, return_inverse=True)
    return owner, local, data[pos], len(uniq)


def csr_row_similarity(indptr, indices, data, rows, anchor, scratch):
    """Dot product of each listed row with row ``anchor``."""
    owner, local, vals, ncols = _local_block(indptr, indices, data, np.append(rows, anchor))
    n = len(rows)
    dense = np.zeros(ncols, dtype=np.float64)
    sel = owner == n
    dense[local[sel]] = vals[sel]
    keep = ~sel
    return np.bincount(owner[keep], weights=vals[keep] * dense[local[keep]], minlength=n)[:n]


def csr_centroid_scores(indptr, indices, data, rows, is_left, scratch):
    """Score each row by cosine to the left centroid minus cosine to the right centroid."""
    owner, local, vals, ncols = _local_block(indptr, indices, data, rows)
    side = is_left[owner]
    cl = np.bincount(local[side], weights=vals[side], minlength=ncols)
    cr = np.bincount(local[~side], weights=vals[~side], minlength=ncols)
    nl = np.sqrt(np.sum(cl * cl))
    nr = np.sqrt(np.sum(cr * cr))
    diff = (cl / nl if nl > 0 else cl) - (cr / nr if nr > 0 else cr)
    return np.bincount(owner, weights=vals * diff[local], minlength=len(rows))
