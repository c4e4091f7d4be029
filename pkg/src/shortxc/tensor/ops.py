"""Differentiable operations on :class:`Tensor`.

Every op promotes its operands to float64, computes, and rounds the result to
the storage dtype of its first operand. Backward closures receive and return
float64 cotangents. No implicit broadcasting: biases and masks go through the
dedicated ops below.
"""
import math

import numpy as np

from ..errors import ContractError, DimensionError
from . import kernels
from .tensor import Tensor, make_result

F64 = np.float64


def _f64(x):
    return x.data.astype(F64, copy=False)


def _require(cond, msg):
    if not cond:
        raise DimensionError(msg)


def matmul(a, b):
    """Matrix product over the last two axes.

    Supported layouts: (m,k)@(k,n), (B,m,k)@(k,n) with a shared right operand,
    and (B,m,k)@(B,k,n).
    """
    _require(a.ndim in (2, 3) and b.ndim in (2, 3), f"matmul needs 2-D/3-D operands, got {a.shape}, {b.shape}")
    _require(a.shape[-1] == b.shape[-2], f"matmul inner axes differ: {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim == 3:
        raise DimensionError("matmul does not broadcast a 2-D left operand over a batch")
    if a.ndim == 3 and b.ndim == 3:
        _require(a.shape[0] == b.shape[0], f"batch sizes differ: {a.shape} @ {b.shape}")
    A, Bm = _f64(a), _f64(b)
    out = A @ Bm

    def back(g):
        ga = g @ np.swapaxes(Bm, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim == 3:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return make_result(out, (a, b), back, a.dtype)


def linear(x, W, b=None):
    """``x @ W.T + b`` over the last axis of a 2-D or 3-D ``x``; W is (out, in)."""
    _require(W.ndim == 2 and x.shape[-1] == W.shape[1], f"linear: x {x.shape} vs W {W.shape}")
    if b is not None:
        _require(b.shape == (W.shape[0],), f"linear: bias {b.shape} vs W {W.shape}")
    X, Wm = _f64(x), _f64(W)
    out = X @ Wm.T
    if b is not None:
        out = out + _f64(b)

    def back(g):
        gx = g @ Wm if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gW = g2.T @ X.reshape(-1, X.shape[-1]) if W.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gW, gb

    parents = (x, W) if b is None else (x, W, b)
    return make_result(out, parents, back, x.dtype)


def transpose(x):
    """Swap the last two axes."""
    _require(x.ndim in (2, 3), f"transpose needs 2-D/3-D, got {x.shape}")
    out = np.swapaxes(x.data, -1, -2)
    return make_result(out, (x,), lambda g: (np.swapaxes(g, -1, -2),), x.dtype)


def reshape(x, shape):
    shape = np.empty(x.shape, dtype=np.int8).reshape(shape).shape
    _require(int(np.prod(shape)) == x.size, f"cannot reshape {x.shape} to {shape}")
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), x.dtype)


def narrow(x, axis, n):
    """First ``n`` entries along ``axis``."""
    axis = axis % x.ndim
    _require(0 < n <= x.shape[axis], f"cannot take {n} entries of axis {axis} of {x.shape}")
    sl = tuple(slice(0, n) if i == axis else slice(None) for i in range(x.ndim))
    full = x.shape

    def back(g):
        out = np.zeros(full, dtype=F64)
        out[sl] = g
        return (out,)

    return make_result(x.data[sl], (x,), back, x.dtype)


def pad_to(x, axis, n):
    """Zero-extend ``axis`` to length ``n``."""
    axis = axis % x.ndim
    _require(x.shape[axis] <= n, f"cannot pad axis {axis} of {x.shape} down to {n}")
    shape = list(x.shape)
    shape[axis] = n
    out = np.zeros(shape, dtype=F64)
    sl = tuple(slice(0, x.shape[axis]) if i == axis else slice(None) for i in range(x.ndim))
    out[sl] = x.data
    return make_result(out, (x,), lambda g: (g[sl],), x.dtype)


def add(a, b):
    _require(a.shape == b.shape, f"add needs equal shapes, got {a.shape}, {b.shape}")
    out = _f64(a) + _f64(b)
    return make_result(out, (a, b), lambda g: (g, g), a.dtype)


def add_bias(x, b, axis=-1):
    """Add a 1-D ``b`` along ``axis`` of ``x``."""
    axis = axis % x.ndim
    _require(b.ndim == 1 and b.shape[0] == x.shape[axis], f"bias {b.shape} vs axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    out = _f64(x) + _f64(b).reshape(view)
    others = tuple(i for i in range(x.ndim) if i != axis)
    return make_result(out, (x, b), lambda g: (g, g.sum(axis=others)), x.dtype)


def mul(a, b):
    _require(a.shape == b.shape, f"mul needs equal shapes, got {a.shape}, {b.shape}")
    A, Bm = _f64(a), _f64(b)
    return make_result(A * Bm, (a, b), lambda g: (g * Bm, g * A), a.dtype)


def mul_const(x, c):
    """Multiply by a constant array (no gradient to ``c``); ``c`` may broadcast into ``x``."""
    c = np.asarray(c, dtype=F64)
    _require(np.broadcast_shapes(x.shape, c.shape) == x.shape, f"constant {c.shape} does not fit {x.shape}")
    return make_result(_f64(x) * c, (x,), lambda g: (g * c,), x.dtype)


def scale(x, s):
    s = float(s)
    return make_result(_f64(x) * s, (x,), lambda g: (g * s,), x.dtype)


def relu(x):
    X = _f64(x)
    on = X > 0
    return make_result(np.where(on, X, 0.0), (x,), lambda g: (g * on,), x.dtype)


def total(x):
    """Sum of all entries as a 1-element tensor."""
    shape = x.shape
    out = np.array([_f64(x).sum()])
    return make_result(out, (x,), lambda g: (np.full(shape, g.reshape(-1)[0]),), x.dtype)


def softmax_rows(x, mask=None):
    """Softmax over the last axis with max subtraction.

    ``mask`` is a boolean array broadcastable to ``x``; False entries are
    excluded (weight exactly 0). A row with no admissible entry is an error.
    """
    X = _f64(x)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), X.shape)
        if not np.all(mask.any(axis=-1)):
            raise ContractError("softmax row has every key masked")
        X = np.where(mask, X, -np.inf)
    m = X.max(axis=-1, keepdims=True)
    e = np.exp(X - m)
    P = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (P * (g - (g * P).sum(axis=-1, keepdims=True)),)

    return make_result(P, (x,), back, x.dtype)


def conv1d(x, W, b=None, stride=1):
    """Valid (unpadded) strided 1-D convolution.

    ``x`` is (C_in, L) or (B, C_in, L); ``W`` is (C_out, C_in, w). Output length
    is ``(L - w) // stride + 1``.
    """
    _require(stride >= 1, "stride must be positive")
    _require(W.ndim == 3, f"filters must be (C_out, C_in, w), got {W.shape}")
    squeeze = x.ndim == 2
    _require(x.ndim in (2, 3), f"conv1d input must be 2-D/3-D, got {x.shape}")
    C_out, C_in, w = W.shape
    C, L = x.shape[-2:]
    _require(C == C_in, f"conv1d channels: input {C} vs filters {C_in}")
    _require(L >= w, f"conv1d input length {L} shorter than filter width {w}")
    if b is not None:
        _require(b.shape == (C_out,), f"conv1d bias {b.shape} vs {C_out} output channels")
    X = _f64(x)
    if squeeze:
        X = X[None]
    X = np.ascontiguousarray(X)
    cols = kernels.im2col1d(X, w, stride)  # (B, L_out, C_in*w)
    Wm = _f64(W).reshape(C_out, C_in * w)
    out = cols @ Wm.T  # (B, L_out, C_out)
    if b is not None:
        out = out + _f64(b)
    out = np.swapaxes(out, 1, 2)
    if squeeze:
        out = out[0]

    def back(g):
        G = g[None] if squeeze else g
        Gt = np.ascontiguousarray(np.swapaxes(G, 1, 2))  # (B, L_out, C_out)
        gx = gW = gb = None
        if x.requires_grad:
            dcols = np.ascontiguousarray(Gt @ Wm)
            gx = kernels.col2im1d(dcols, C_in, L, w, stride)
            if squeeze:
                gx = gx[0]
        if W.requires_grad:
            g2 = Gt.reshape(-1, C_out)
            gW = (g2.T @ cols.reshape(-1, C_in * w)).reshape(C_out, C_in, w)
        if b is not None and b.requires_grad:
            gb = Gt.reshape(-1, C_out).sum(axis=0)
        return gx, gW, gb

    parents = (x, W) if b is None else (x, W, b)
    return make_result(out, parents, back, x.dtype)


def conv_out_len(length, width, stride):
    """Output length of a valid strided convolution, or an error if the window does not fit."""
    if length < width:
        raise DimensionError(f"length {length} shorter than filter width {width}")
    return (length - width) // stride + 1


def concat(xs, axis=-1):
    xs = list(xs)
    _require(len(xs) > 0, "concat of nothing")
    nd = xs[0].ndim
    axis = axis % nd
    for t in xs[1:]:
        _require(
            t.ndim == nd and all(t.shape[i] == xs[0].shape[i] for i in range(nd) if i != axis),
            f"concat shapes disagree off axis {axis}: {[t.shape for t in xs]}",
        )
    out = np.concatenate([_f64(t) for t in xs], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_result(out, tuple(xs), back, xs[0].dtype)


def embedding(table, ids):
    """Row lookup ``table[ids]``; the PAD row (id 0) never receives gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    V, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise DimensionError(f"token id out of range [0, {V})")
    out = _f64(table)[ids]

    def back(g):
        flat = np.ascontiguousarray(g.reshape(-1, d))
        return (kernels.embedding_backward(np.ascontiguousarray(ids.reshape(-1)), flat, V),)

    return make_result(out, (table,), back, table.dtype)


def spectral_scale(W, u):
    """``W / ||W.T u||`` for a fixed unit vector ``u`` (the power-iteration state).

    With ``v = W.T u / ||W.T u||`` the divisor equals ``u.T W v``, the usual
    one-step spectral-norm estimate; the gradient flows through the estimate.
    A zero estimate leaves ``W`` unscaled.
    """
    u = np.asarray(u, dtype=F64)
    _require(W.ndim == 2 and u.shape == (W.shape[0],), f"spectral_scale: W {W.shape}, u {u.shape}")
    Wm = _f64(W)
    wu = Wm.T @ u
    sigma = math.sqrt(float(wu @ wu))
    if sigma == 0.0:
        return make_result(Wm, (W,), lambda g: (g,), W.dtype)
    v = wu / sigma
    out = Wm / sigma

    def back(g):
        inner = float(np.sum(g * Wm))
        return (g / sigma - (inner / sigma**2) * np.outer(u, v),)

    return make_result(out, (W,), back, W.dtype)


def gather_logits(g, W, b, idx, counts):
    """Per-instance shortlisted scores ``out[i, c] = W[idx[i, c]] . g[i] + b[idx[i, c]]``.

    ``idx`` is (B, C) with the first ``counts[i]`` entries of row i valid and
    unique; the remaining slots are padding and score 0 with no gradient.
    """
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    counts = np.ascontiguousarray(counts, dtype=np.int64)
    _require(g.ndim == 2 and W.ndim == 2 and g.shape[1] == W.shape[1], f"gather_logits: g {g.shape}, W {W.shape}")
    _require(idx.ndim == 2 and idx.shape[0] == g.shape[0], f"gather_logits: idx {idx.shape} vs batch {g.shape[0]}")
    L = W.shape[0]
    for i, n in enumerate(counts):
        if n and (idx[i, :n].min() < 0 or idx[i, :n].max() >= L):
            raise ContractError(f"shortlist label id out of range [0, {L})")
    G = np.ascontiguousarray(_f64(g))
    Wm = np.ascontiguousarray(_f64(W))
    bv = np.ascontiguousarray(_f64(b))
    out = kernels.gather_dot(G, Wm, bv, idx, counts)

    def back(dz):
        dg, dW, db = kernels.gather_dot_backward(np.ascontiguousarray(dz), G, Wm, idx, counts)
        return dg, dW, db

    return make_result(out, (g, W, b), back, g.dtype)


def bce_with_logits(z, y, weight=None):
    """Binary cross-entropy on logits: summed over the last axis, averaged over rows.

    Uses ``max(z,0) - z*y + log(1 + exp(-|z|))``. ``weight`` (same shape, 0/1)
    drops padded slots.
    """
    Z = _f64(z)
    Y = np.asarray(y, dtype=F64)
    _require(Y.shape == Z.shape, f"bce targets {Y.shape} vs logits {Z.shape}")
    Wt = np.ones_like(Z) if weight is None else np.asarray(weight, dtype=F64)
    rows = 1 if Z.ndim == 1 else Z.shape[0]
    per = np.maximum(Z, 0.0) - Z * Y + np.log1p(np.exp(-np.abs(Z)))
    out = np.array([(per * Wt).sum() / rows])

    def back(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * Z))
        return ((sig - Y) * Wt * (g.reshape(-1)[0] / rows),)

    return make_result(out, (z,), back, z.dtype)
