"""Tokenization, vocabulary, embedding tables, TF-IDF features and dataset files."""
import string
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ParseError
from .tensor import Tensor

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1
DEFAULT_SEQ_LEN = 32

_PUNCT = str.maketrans("", "", string.punctuation)


def _strip(token):
    return token.lower().translate(_PUNCT)


def default_stopwords():
    """The bundled English stopword list, normalized the same way as tokens."""
    text = resources.files("shortxc").joinpath("data/stopwords_en.txt").read_text("utf-8")
    return frozenset(w for w in (_strip(line.strip()) for line in text.splitlines()) if w)


def tokenize(text, stopwords=None):
    """Lowercase, strip punctuation, split on whitespace, drop stopwords.

    ``stopwords=None`` uses the bundled list; pass an empty set to keep everything.
    """
    stop = default_stopwords() if stopwords is None else frozenset(_strip(w) for w in stopwords)
    return [t for t in text.lower().translate(_PUNCT).split() if t not in stop]


class Vocabulary:
    """Dense token ids with PAD = 0 and UNK = 1."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[:2] != [PAD, UNK]:
            raise ConfigError("vocabulary must start with PAD and UNK")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ConfigError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, token_lists, max_size=None):
        """Most frequent first, ties alphabetical; deterministic for a given corpus."""
        counts = Counter(t for toks in token_lists for t in toks)
        counts.pop(PAD, None)
        counts.pop(UNK, None)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - 2)]
        return cls([PAD, UNK] + [t for t, _ in ranked])

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def encode(self, tokens):
        return [self.index.get(t, UNK_ID) for t in tokens]

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh)


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    true_len: int


def pad_truncate(ids, seq_len=DEFAULT_SEQ_LEN):
    """Keep the first ``seq_len`` ids and pad with PAD up to exactly ``seq_len``.

    An empty input becomes a single UNK so every query has one attendable position.
    """
    ids = list(ids)[:seq_len] or [UNK_ID]
    out = np.full(seq_len, PAD_ID, dtype=np.int32)
    out[: len(ids)] = ids
    return TokenSequence(out, len(ids))


@dataclass(frozen=True)
class SparseVector:
    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if len(self.indices) != len(self.weights):
            raise ValueError("indices and weights differ in length")
        if len(self.indices) > 1 and np.any(np.diff(self.indices) <= 0):
            raise ValueError("sparse indices must be strictly increasing")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("sparse weights must be finite")


def sparse_row(matrix, i):
    """Row ``i`` of a CSR matrix as a :class:`SparseVector`."""
    lo, hi = matrix.indptr[i], matrix.indptr[i + 1]
    return SparseVector(matrix.indices[lo:hi].astype(np.int64), matrix.data[lo:hi].astype(np.float64))


@dataclass
class Corpus:
    """Tokenized queries and their label sets, as read from disk."""

    tokens: list
    labels: list
    num_labels: int
    num_features: int = 0


@dataclass
class Dataset:
    """Encoded instances: ``ids`` (N, S), ``lengths`` (N,), ``labels`` list of sorted id arrays."""

    ids: np.ndarray
    lengths: np.ndarray
    labels: list
    num_labels: int
    vocab: Vocabulary = field(repr=False, default=None)

    def __len__(self):
        return len(self.labels)

    @property
    def seq_len(self):
        return self.ids.shape[1]

    def instance(self, i):
        return TokenSequence(self.ids[i], int(self.lengths[i])), self.labels[i]

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.ids[rows], self.lengths[rows], [self.labels[r] for r in rows], self.num_labels, self.vocab)

    def label_matrix(self):
        """(N, L) binary CSR incidence matrix."""
        indptr = np.zeros(len(self.labels) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(y) for y in self.labels])
        cols = np.concatenate(self.labels) if self.labels else np.zeros(0, dtype=np.int64)
        data = np.ones(len(cols), dtype=np.float64)
        return sp.csr_matrix((data, cols, indptr), shape=(len(self.labels), self.num_labels))

    def label_frequencies(self):
        freq = np.zeros(self.num_labels, dtype=np.int64)
        for y in self.labels:
            freq[y] += 1
        return freq

    @classmethod
    def from_corpus(cls, corpus, vocab, seq_len=DEFAULT_SEQ_LEN):
        n = len(corpus.tokens)
        ids = np.zeros((n, seq_len), dtype=np.int32)
        lengths = np.zeros(n, dtype=np.int32)
        for i, toks in enumerate(corpus.tokens):
            ts = pad_truncate(vocab.encode(toks), seq_len)
            ids[i] = ts.ids
            lengths[i] = ts.true_len
        return cls(ids, lengths, list(corpus.labels), corpus.num_labels, vocab)


def build_embedding_table(vocab, pretrained=None, d=300, seed=0):
    """(V, d) table: pretrained rows where available, else U(-0.25, 0.25); PAD row zero."""
    if pretrained:
        dims = {len(v) for v in pretrained.values()}
        if dims != {d}:
            raise ConfigError(f"pretrained vectors have dimension {sorted(dims)}, expected {d}")
    rng = np.random.default_rng(seed)
    table = rng.uniform(-0.25, 0.25, size=(len(vocab), d)).astype(np.float32)
    if pretrained:
        for tok, i in vocab.index.items():
            vec = pretrained.get(tok)
            if vec is not None:
                table[i] = np.asarray(vec, dtype=np.float32)
    table[PAD_ID] = 0.0
    return Tensor(table)


def load_embeddings(path, d=None, vocab=None):
    """Read ``word v1 ... vd`` lines; a leading ``count dim`` header line is skipped.

    When ``vocab`` is given only its words are kept.
    """
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if len(parts) < 2:
                continue
            word = parts[0]
            if vocab is not None and word not in vocab:
                continue
            try:
                vec = np.array(parts[1:], dtype=np.float32)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad embedding values") from exc
            if d is not None and len(vec) != d:
                raise ConfigError(f"{path}:{lineno}: vector has {len(vec)} values, expected {d}")
            out[word] = vec
    return out


def tfidf(dataset, vocab=None):
    """Per-instance ``tf * ln(N / df)`` over in-vocabulary tokens, rows L2-normalized.

    Returns an (N, V) CSR matrix (float64) with sorted indices. PAD and UNK
    carry no weight.
    """
    V = len(vocab if vocab is not None else dataset.vocab)
    N = len(dataset)
    rows, cols, vals = [], [], []
    df = np.zeros(V, dtype=np.int64)
    for i in range(N):
        toks = dataset.ids[i, : dataset.lengths[i]]
        toks = toks[toks > UNK_ID]
        if toks.size == 0:
            continue
        u, c = np.unique(toks, return_counts=True)
        df[u] += 1
        rows.append(np.full(len(u), i, dtype=np.int64))
        cols.append(u.astype(np.int64))
        vals.append(c.astype(np.float64))
    if not rows:
        return sp.csr_matrix((N, V), dtype=np.float64)
    r, c, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    idf = np.zeros(V, dtype=np.float64)
    seen = df > 0
    idf[seen] = np.log(N / df[seen])
    v = v * idf[c]
    m = sp.csr_matrix((v, (r, c)), shape=(N, V))
    m.sort_indices()
    norms = np.sqrt(np.asarray(m.multiply(m).sum(axis=1)).ravel())
    scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    m = sp.diags(scale) @ m
    m = sp.csr_matrix(m)
    m.eliminate_zeros()
    m.sort_indices()
    return m


def parse_label_header(line, path="<labels>"):
    parts = line.split()
    if len(parts) != 3:
        raise ParseError(f"{path}:1: header must be 'N F L', got {line.strip()!r}")
    try:
        n, f, L = (int(p) for p in parts)
    except ValueError as exc:
        raise ParseError(f"{path}:1: non-integer header {line.strip()!r}") from exc
    if n < 0 or f < 0 or L <= 0:
        raise ParseError(f"{path}:1: header values out of range {line.strip()!r}")
    return n, f, L


def read_label_file(path):
    """Header ``N F L`` then N lines of comma-separated label ids (``id`` or ``id:value``)."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}:1: empty label file")
    n, f, L = parse_label_header(lines[0], path)
    body = lines[1:]
    if len(body) != n:
        raise ParseError(f"{path}:{len(body) + 1}: header declares {n} instances, file has {len(body)}")
    labels = []
    for lineno, line in enumerate(body, 2):
        text = line.strip()
        if not text:
            labels.append(np.zeros(0, dtype=np.int64))
            continue
        try:
            ids = sorted({int(tok.split(":")[0]) for tok in text.split(",") if tok.strip()})
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: bad label id in {text!r}") from exc
        if ids and (ids[0] < 0 or ids[-1] >= L):
            raise ParseError(f"{path}:{lineno}: label id out of range [0, {L})")
        labels.append(np.asarray(ids, dtype=np.int64))
    return (n, f, L), labels


def read_corpus(text_path, label_path, stopwords=None, require_labels=False):
    (n, f, L), labels = read_label_file(label_path)
    with open(text_path, encoding="utf-8") as fh:
        texts = fh.read().splitlines()
    if len(texts) != n:
        raise ParseError(f"{text_path}:{len(texts)}: expected {n} lines to match {label_path}, found {len(texts)}")
    if require_labels:
        for i, y in enumerate(labels):
            if y.size == 0:
                raise ParseError(f"{label_path}:{i + 2}: training instance has no labels")
    stop = default_stopwords() if stopwords is None else stopwords
    tokens = [tokenize(t, stop) for t in texts]
    return Corpus(tokens, labels, L, f)


def load_dataset(text_path, label_path, vocab=None, seq_len=DEFAULT_SEQ_LEN, stopwords=None, require_labels=False):
    """Read a text/label file pair; the vocabulary is built from this corpus when not given."""
    corpus = read_corpus(text_path, label_path, stopwords, require_labels)
    if vocab is None:
        vocab = Vocabulary.build(corpus.tokens)
    return Dataset.from_corpus(corpus, vocab, seq_len)


def write_label_file(path, labels, num_labels, num_features=0):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(labels)} {num_features} {num_labels}\n")
        for y in labels:
            fh.write(",".join(str(int(l)) for l in y) + "\n")

