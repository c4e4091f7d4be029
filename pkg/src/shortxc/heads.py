"""Classifier heads over the encoder feature ``h_f``.

Both heads share one shape: ``logits = W . (relu(R . h + b_R) + h) + b_W``.
The plus variant scales its residual maps ``R_m`` and ``R_e`` by a
power-iteration estimate of their top singular value, and scores the extreme
head only on the labels of the top-K predicted clusters.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import kernels


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _unit(rng, n):
    u = rng.standard_normal(n)
    return (u / np.linalg.norm(u)).astype(np.float32)


def init_head_params(variant, feature_len, num_labels, num_clusters, rng, warmup_iters=20):
    """Head parameters and power-iteration state, keyed by checkpoint name."""
    n = feature_len
    params, state = {}, {}
    if variant == "full":
        params["head.R"] = _uniform(rng, (n, n), n)
        params["head.R_b"] = np.zeros(n, dtype=np.float32)
        params["head.W"] = _uniform(rng, (num_labels, n), n)
        params["head.W_b"] = np.zeros(num_labels, dtype=np.float32)
    elif variant == "plus":
        for tag, out in (("m", num_clusters), ("e", num_labels)):
            params[f"head.R{tag}"] = _uniform(rng, (n, n), n)
            params[f"head.R{tag}_b"] = np.zeros(n, dtype=np.float32)
            params[f"head.W{tag}"] = _uniform(rng, (out, n), n)
            params[f"head.W{tag}_b"] = np.zeros(out, dtype=np.float32)
        for tag in ("rm", "re"):
            u = _unit(rng, n)
            W = params["head.R" + tag[1]]
            for _ in range(warmup_iters):
                u, _ = power_iteration(W, u)
            state[f"head.u_{tag}"] = u.astype(np.float32)
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    return params, state


def power_iteration(W, u):
    """One step: ``v = W^T u / |W^T u|``, ``u' = W v / |W v|``; returns ``(u', |W v|)``.

    A zero matrix returns ``u`` unchanged and an estimate of 0.
    """
    W = np.asarray(W, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    wu = W.T @ u
    nv = np.linalg.norm(wu)
    if nv == 0.0:
        return u, 0.0
    v = wu / nv
    wv = W @ v
    sigma = float(np.linalg.norm(wv))
    if sigma == 0.0:
        return u, 0.0
    return wv / sigma, sigma


def spectral_normalize(W, state):
    """Return ``W / sigma_hat`` after one power-iteration step; ``state`` (unit u) is updated in place."""
    W = np.asarray(W)
    u_new, sigma = power_iteration(W, state)
    if sigma == 0.0:
        return W.copy()
    state[...] = u_new
    return (W.astype(np.float64) / sigma).astype(W.dtype)


def residual(h, R, b, u=None):
    """``relu(R_eff . h + b) + h`` with ``R_eff = R / |R^T u|`` when a state ``u`` is given."""
    Reff = T.spectral_scale(R, u) if u is not None else R
    return T.add(T.relu(T.linear(h, Reff, b)), h)


def extreme_forward_full(h, params):
    g = residual(h, params["head.R"], params["head.R_b"])
    return T.linear(g, params["head.W"], params["head.W_b"])


def meta_forward(h, params, state):
    g = residual(h, params["head.Rm"], params["head.Rm_b"], state["head.u_rm"])
    return T.linear(g, params["head.Wm"], params["head.Wm_b"])


def extreme_embedding(h, params, state):
    """``g_e``, the input of the shortlisted extreme classifier."""
    return residual(h, params["head.Re"], params["head.Re_b"], state["head.u_re"])


def extreme_forward_shortlist(h, params, state, batch):
    """Logits of ``W_e`` rows listed in ``batch`` (a :class:`BatchShortlist`) -> (B, C)."""
    g = extreme_embedding(h, params, state)
    return T.gather_logits(g, params["head.We"], params["head.We_b"], batch.idx, batch.counts)


@dataclass
class Shortlist:
    labels: np.ndarray
    positive: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass
class BatchShortlist:
    """Row-padded shortlists: first ``counts[i]`` entries of ``idx[i]`` are valid."""

    idx: np.ndarray
    counts: np.ndarray
    positive: np.ndarray

    @classmethod
    def from_lists(cls, shortlists):
        B = len(shortlists)
        C = max((len(s) for s in shortlists), default=0)
        idx = np.zeros((B, C), dtype=np.int64)
        pos = np.zeros((B, C), dtype=np.float64)
        counts = np.zeros(B, dtype=np.int64)
        for i, s in enumerate(shortlists):
            n = len(s)
            idx[i, :n] = s.labels
            pos[i, :n] = s.positive
            counts[i] = n
        return cls(idx, counts, pos)

    def valid(self):
        return np.arange(self.idx.shape[1])[None, :] < self.counts[:, None]

    def rows(self):
        return [self.idx[i, : self.counts[i]] for i in range(len(self.counts))]


def top_clusters(meta_logits, K):
    """(B, L') logits -> (B, K) cluster ids, highest first, ties to the lower id."""
    if K <= 0:
        raise ConfigError(f"K must be positive, got {K}")
    z = np.ascontiguousarray(np.atleast_2d(meta_logits), dtype=np.float64)
    if K > z.shape[1]:
        raise ConfigError(f"K={K} exceeds the {z.shape[1]} clusters")
    return kernels.topk_rows(z, K)


def shortlist(meta_logits, K, tree, positives=None):
    """Labels of the K best clusters for one instance, plus ``positives`` when given (training)."""
    clusters = top_clusters(meta_logits, K)[0]
    return _expand(clusters, tree, positives)


def _expand(clusters, tree, positives):
    labels = np.sort(np.concatenate([tree.members[c] for c in clusters]))
    if positives is not None:
        positives = np.asarray(positives, dtype=np.int64)
        labels = np.union1d(labels, positives)
        flags = np.isin(labels, positives).astype(np.float64)
    else:
        flags = np.zeros(len(labels), dtype=np.float64)
    return Shortlist(labels.astype(np.int64), flags)


def batch_shortlist(meta_logits, K, tree, positives=None):
    """Shortlists for a batch of (B, L') meta logits; ``positives`` is a list of label arrays."""
    tops = top_clusters(meta_logits, K)
    lists = [_expand(tops[i], tree, None if positives is None else positives[i]) for i in range(len(tops))]
    batch = BatchShortlist.from_lists(lists)
    if positives is not None:
        for i, y in enumerate(positives):
            got = batch.idx[i, : batch.counts[i]]
            if not np.isin(y, got).all():
                raise ContractError("shortlist lost a positive label")
    return batch
