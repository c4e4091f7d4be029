"""Independent reference implementations used by the tests.

Everything here is written with plain loops or closed forms so it shares no
code path with the package under test.
"""
import itertools
import math

import numpy as np


def matmul_loop(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def conv1d_loop(x, W, b=None, stride=1):
    """x (C_in, L), W (C_out, C_in, w) -> (C_out, L_out), valid windows only."""
    C_in, L = x.shape
    C_out, _, w = W.shape
    starts = list(range(0, L - w + 1, stride))
    out = np.zeros((C_out, len(starts)))
    for o in range(C_out):
        for j, s in enumerate(starts):
            acc = 0.0 if b is None else float(b[o])
            for c in range(C_in):
                for t in range(w):
                    acc += float(W[o, c, t]) * float(x[c, s + t])
            out[o, j] = acc
    return out


def conv_len_steps(length, width, stride):
    """Count valid window placements by sliding a start pointer."""
    n, start = 0, 0
    while start + width <= length:
        n += 1
        start += stride
    return n


def feature_len_steps(d, p, widths=(4, 8, 16), final=16, stride=4):
    branches = [conv_len_steps(d, w, stride) for w in widths]
    if min(branches) == 0:
        return 0
    return p * conv_len_steps(sum(branches), final, stride)


def softmax_row(row, mask=None):
    row = [float(v) for v in row]
    keep = [True] * len(row) if mask is None else list(mask)
    top = max(v for v, m in zip(row, keep) if m)
    e = [math.exp(v - top) if m else 0.0 for v, m in zip(row, keep)]
    s = sum(e)
    return [v / s for v in e]


def attention_loop(q, k, v, Wq, Wk, Wv, bq, bk, bv, mask=None):
    """Per-query-row loop: softmax((q_i Wq^T + bq)(K)^T / sqrt(b)) V."""
    a, b = q.shape
    Q = [[sum(q[i, t] * Wq[j, t] for t in range(b)) + bq[j] for j in range(b)] for i in range(a)]
    K = [[sum(k[i, t] * Wk[j, t] for t in range(b)) + bk[j] for j in range(b)] for i in range(a)]
    V = [[sum(v[i, t] * Wv[j, t] for t in range(b)) + bv[j] for j in range(b)] for i in range(a)]
    out = np.zeros((a, b))
    for i in range(a):
        scores = [sum(Q[i][t] * K[r][t] for t in range(b)) / math.sqrt(b) for r in range(a)]
        w = softmax_row(scores, mask)
        for j in range(b):
            out[i, j] = sum(w[r] * V[r][j] for r in range(a))
    return out


def central_difference(f, arr, idx, h):
    """(f(x + h e_idx) - f(x - h e_idx)) / 2h with ``arr`` perturbed in place and restored."""
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2.0 * h)


def rel_error(a, n, floor=1e-8):
    return abs(a - n) / max(abs(a), abs(n), floor)


def topk_sort(values, k):
    """Indices of the k largest values, ties to the lower index, via a full sort."""
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return order[:k]


def precision_brute(y, ranked, k):
    hits = 0
    for pos in range(k):
        if pos < len(ranked) and ranked[pos] in y:
            hits += 1
    return hits / k


def psp_exhaustive(y, ranked, k, p, universe):
    """Achieved propensity-weighted hits over the best value across every ranking of ``universe``."""
    def gain(r):
        return sum(1.0 / p[l] for l in r[:k] if l in y)

    best = max(gain(list(r)) for r in itertools.permutations(universe))
    return gain(list(ranked)) / best


def propensity_formula(freq, n, A, B):
    C = (math.log(n) - 1.0) * math.pow(B + 1.0, A)
    return 1.0 / (1.0 + C * math.pow(freq + B, -A))


def top_singular_bisection(W, iters=200):
    """Largest singular value: bisect on t until t*I - W^T W is barely positive definite."""
    A = np.asarray(W, dtype=np.float64).T @ np.asarray(W, dtype=np.float64)
    lo, hi = 0.0, float(np.trace(A)) + 1.0
    eye = np.eye(A.shape[0])
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        try:
            np.linalg.cholesky(mid * eye - A)
            hi = mid
        except np.linalg.LinAlgError:
            lo = mid
    return math.sqrt(0.5 * (lo + hi))
