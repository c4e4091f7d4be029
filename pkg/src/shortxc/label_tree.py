"""Label clustering for shortlisting.

Labels are represented by PIFA vectors (normalized sum of the TF-IDF vectors of
their positive training instances) and recursively halved with balanced
2-means until there are ``L'`` leaves. Leaves, read left to right, are the
cluster ids.
"""
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ContractError, ParseError
from .tensor import kernels

MAX_ITER = 100


def pifa(dataset, features):
    """(L, V) CSR: row l is the L2-normalized sum of ``features`` rows of instances with label l."""
    Y = dataset.label_matrix().T.tocsr()
    P = sp.csr_matrix(Y @ features)
    P.sort_indices()
    norms = np.sqrt(np.asarray(P.multiply(P).sum(axis=1)).ravel())
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    P = sp.csr_matrix(sp.diags(inv) @ P)
    P.eliminate_zeros()
    P.sort_indices()
    return P


class _Csr:
    """int64/float64 CSR arrays plus the scratch buffers the compiled kernels reuse."""

    def __init__(self, matrix):
        m = sp.csr_matrix(matrix)
        m.sort_indices()
        self.indptr = m.indptr.astype(np.int64)
        self.indices = m.indices.astype(np.int64)
        self.data = m.data.astype(np.float64)
        self.nnz_per_row = np.diff(self.indptr)
        self.scratch1 = np.zeros(m.shape[1], dtype=np.float64)
        self.scratch3 = np.zeros((3, m.shape[1]), dtype=np.float64)
        self.n_rows = m.shape[0]

    def similarity(self, rows, anchor):
        return kernels.csr_row_similarity(self.indptr, self.indices, self.data, rows, int(anchor), self.scratch1)

    def centroid_scores(self, rows, is_left):
        return kernels.csr_centroid_scores(self.indptr, self.indices, self.data, rows, is_left, self.scratch3)


def _half(scores, n_left):
    """Boolean left-side mask: the ``n_left`` highest scores, ties to earlier (lower-id) rows."""
    order = np.argsort(-scores, kind="stable")
    left = np.zeros(len(scores), dtype=bool)
    left[order[:n_left]] = True
    return left


def _split_rows(csr, rows, rng, max_iter=MAX_ITER):
    rows = np.asarray(rows, dtype=np.int64)
    nonzero = csr.nnz_per_row[rows] > 0
    nz, zero = rows[nonzero], rows[~nonzero]
    n = len(nz)
    if n >= 2:
        first = int(rng.integers(n))
        s1 = csr.similarity(nz, nz[first])
        s1[first] = np.inf
        second = int(np.argmin(s1))
        s1[first] = csr.similarity(nz[first : first + 1], nz[first])[0]
        s2 = csr.similarity(nz, nz[second])
        n_left = (n + 1) // 2
        is_left = _half(s1 - s2, n_left)
        for _ in range(max_iter):
            nxt = _half(csr.centroid_scores(nz, is_left), n_left)
            if np.array_equal(nxt, is_left):
                break
            is_left = nxt
        left, right = list(nz[is_left]), list(nz[~is_left])
    else:
        left, right = list(nz), []
    # labels without features go, in id order, to whichever side is smaller
    for r in zero:
        (left if len(left) <= len(right) else right).append(r)
    return np.sort(np.asarray(left, dtype=np.int64)), np.sort(np.asarray(right, dtype=np.int64))


def balanced_2means(vectors, rows=None, seed=0, max_iter=MAX_ITER):
    """Split ``rows`` of a CSR matrix of unit (or zero) vectors into two halves.

    Returns ``(left, right)`` sorted label-id arrays with ``|left| - |right|`` in {0, 1}.
    """
    csr = vectors if isinstance(vectors, _Csr) else _Csr(vectors)
    rows = np.arange(csr.n_rows) if rows is None else np.sort(np.asarray(rows, dtype=np.int64))
    if len(rows) < 2:
        raise ContractError("balanced 2-means needs at least two labels")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _split_rows(csr, rows, rng, max_iter)


@dataclass
class LabelTree:
    cluster_of: np.ndarray
    members: list
    num_clusters: int
    seed: int = 0

    @property
    def num_labels(self):
        return len(self.cluster_of)

    @classmethod
    def from_assignment(cls, cluster_of, num_clusters, seed=0):
        cluster_of = np.asarray(cluster_of, dtype=np.int64)
        if cluster_of.size and (cluster_of.min() < 0 or cluster_of.max() >= num_clusters):
            raise ContractError("cluster id out of range")
        order = np.argsort(cluster_of, kind="stable")
        bounds = np.searchsorted(cluster_of[order], np.arange(num_clusters + 1))
        members = [order[bounds[c] : bounds[c + 1]].astype(np.int64) for c in range(num_clusters)]
        return cls(cluster_of, members, num_clusters, seed)

    def sizes(self):
        return np.array([len(m) for m in self.members], dtype=np.int64)

    def check(self):
        """Partition and round-trip consistency between ``cluster_of`` and ``members``."""
        if int(self.sizes().sum()) != self.num_labels:
            raise ContractError("clusters do not partition the labels")
        for c, mem in enumerate(self.members):
            if np.any(self.cluster_of[mem] != c):
                raise ContractError(f"cluster {c} lists a label mapped elsewhere")
        return True

    def to_bytes(self):
        head = struct.pack("<QQQ", self.num_labels, self.num_clusters, self.seed)
        return head + np.ascontiguousarray(self.cluster_of, dtype="<u4").tobytes()

    @classmethod
    def from_bytes(cls, raw):
        if len(raw) < 24:
            raise ParseError("tree file shorter than its header")
        L, Lp, seed = struct.unpack("<QQQ", raw[:24])
        if len(raw) != 24 + 4 * L:
            raise ParseError(f"tree file holds {(len(raw) - 24) // 4} ids, header says {L}")
        ids = np.frombuffer(raw[24:], dtype="<u4").astype(np.int64)
        return cls.from_assignment(ids, int(Lp), int(seed))

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _is_power_of_two(n):
    return n >= 1 and (n & (n - 1)) == 0


def build_hlt(vectors, num_clusters, seed=0, max_iter=MAX_ITER, on_split=None):
    """Recursive balanced 2-means to ``num_clusters`` leaves (a power of two, at most L).

    Node ``j`` at depth ``k`` draws from ``default_rng([seed, k, j])`` so subtrees
    are independent of traversal order. ``on_split(parent, left, right)`` is
    called for every split (used to audit balance).
    """
    csr = _Csr(vectors)
    L = csr.n_rows
    if not _is_power_of_two(num_clusters):
        raise ConfigError(f"number of clusters must be a power of two, got {num_clusters}")
    if num_clusters > L:
        raise ConfigError(f"{num_clusters} clusters for only {L} labels")
    nodes = [np.arange(L, dtype=np.int64)]
    depth = num_clusters.bit_length() - 1
    for level in range(depth):
        nxt = []
        for j, node in enumerate(nodes):
            rng = np.random.default_rng([seed, level, j])
            left, right = _split_rows(csr, node, rng, max_iter)
            if not 0 <= len(left) - len(right) <= 1:
                raise ContractError(f"unbalanced split {len(left)}/{len(right)}")
            if on_split is not None:
                on_split(node, left, right)
            nxt.extend((left, right))
        nodes = nxt
    cluster_of = np.empty(L, dtype=np.int64)
    for c, mem in enumerate(nodes):
        cluster_of[mem] = c
    return LabelTree(cluster_of, nodes, num_clusters, seed)


def cluster_labels(y, tree):
    """Sorted unique cluster ids of the labels in ``y``."""
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= tree.num_labels):
        raise ContractError("label id out of range")
    return np.unique(tree.cluster_of[y])


def cluster_indicator(y, tree):
    out = np.zeros(tree.num_clusters, dtype=np.float64)
    out[cluster_labels(y, tree)] = 1.0
    return out
