"""Ranking metrics, prediction and the two permutation-robustness harnesses.

Rankings are integer label arrays, best first. Instances with an empty
ground-truth set are skipped when averaging (they have no defined precision).
"""
import math
from dataclasses import dataclass

import numpy as np

from . import heads
from . import tensor as T
from .errors import ContractError
from .tensor import kernels

KS = (1, 3, 5)


def _check_ranked(ranked):
    ranked = np.asarray(ranked, dtype=np.int64).reshape(-1)
    if len(np.unique(ranked)) != len(ranked):
        raise ContractError("ranked list contains duplicate labels")
    return ranked


def precision_at_k(y, ranked, k):
    """``|top-k & y| / k``. A ranking shorter than ``k`` counts its missing slots as misses."""
    ranked = _check_ranked(ranked)
    truth = set(int(l) for l in y)
    hits = sum(1 for l in ranked[:k] if int(l) in truth)
    return hits / k


class PropensityModel:
    """``p_l = 1 / (1 + C (N_l + B)^-A)`` with ``C = (ln N - 1)(B + 1)^A``.

    ``N_l`` is the training frequency of label l and ``N`` the number of
    training instances.
    """

    def __init__(self, label_freq, num_instances, A=0.55, B=1.5):
        self.A, self.B = float(A), float(B)
        self.num_instances = int(num_instances)
        freq = np.asarray(label_freq, dtype=np.float64)
        C = (math.log(self.num_instances) - 1.0) * (self.B + 1.0) ** self.A
        self.p = 1.0 / (1.0 + C * np.exp(-self.A * np.log(freq + self.B)))

    @classmethod
    def from_dataset(cls, dataset, A=0.55, B=1.5):
        return cls(dataset.label_frequencies(), len(dataset), A, B)

    @classmethod
    def uniform(cls, num_labels):
        m = cls.__new__(cls)
        m.A = m.B = float("nan")
        m.num_instances = 0
        m.p = np.ones(num_labels)
        return m

    def __len__(self):
        return len(self.p)

    def inverse(self, labels):
        p = self.p[np.asarray(labels, dtype=np.int64)]
        if np.any(p <= 0):
            raise ContractError("label propensity is zero")
        return 1.0 / p


def psp_at_k(y, ranked, k, prop):
    """Propensity-scored precision of one instance, normalized by its best achievable value."""
    ranked = _check_ranked(ranked)
    y = np.unique(np.asarray(y, dtype=np.int64))
    if len(y) == 0:
        return 0.0
    w = prop.inverse(y)
    top = ranked[:k]
    achieved = float(w[np.isin(y, top)].sum())
    ideal = float(np.sort(w)[::-1][:k].sum())
    return achieved / ideal


@dataclass
class MetricsReport:
    precision: dict
    psp: dict
    num_instances: int
    num_scored: int

    def to_dict(self):
        out = {f"P@{k}": self.precision[k] for k in KS}
        out.update({f"PSP@{k}": self.psp[k] for k in KS})
        out["num_instances"] = self.num_instances
        out["num_scored"] = self.num_scored
        return out

    def format(self):
        lines = []
        for key, v in self.to_dict().items():
            lines.append(f"{key}: {v}" if isinstance(v, int) else f"{key}: {v:.6f}")
        return "\n".join(lines) + "\n"


def evaluate(rankings, labels, prop):
    """Average P@k and PSP@k for k in 1, 3, 5 over instances with at least one label."""
    if len(rankings) != len(labels):
        raise ContractError(f"{len(rankings)} rankings for {len(labels)} label sets")
    p = {k: 0.0 for k in KS}
    s = {k: 0.0 for k in KS}
    n = 0
    for ranked, y in zip(rankings, labels):
        if len(y) == 0:
            continue
        n += 1
        for k in KS:
            p[k] += precision_at_k(y, ranked, k)
            s[k] += psp_at_k(y, ranked, k, prop)
    denom = max(n, 1)
    return MetricsReport({k: p[k] / denom for k in KS}, {k: s[k] / denom for k in KS}, len(labels), n)


@dataclass
class Predictions:
    """Per-instance ranked labels and their sigmoid scores."""

    labels: list
    scores: list

    def __len__(self):
        return len(self.labels)

    def lines(self):
        for ls, sc in zip(self.labels, self.scores):
            yield " ".join(f"{int(l)}:{float(s):.6f}" for l, s in zip(ls, sc))

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.lines():
                fh.write(line + "\n")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _rank(z, k):
    """Top-k columns of each row, highest first, ties to the lower column."""
    k = min(k, z.shape[1])
    return kernels.topk_rows(np.ascontiguousarray(z, dtype=np.float64), k)


def predict(model, ids, lengths, k=5, top_k=None, batch_size=256):
    """Rank labels for a batch of encoded queries.

    The full variant scores all labels. The plus variant scores only the labels
    of its ``top_k`` best clusters, so fewer than ``k`` labels can come back.
    """
    ids = np.asarray(ids)
    lengths = np.asarray(lengths)
    out_l, out_s = [], []
    if model.variant == "plus" and top_k is None:
        raise ContractError("plus prediction needs top_k")
    with T.no_grad():
        for start in range(0, len(ids), batch_size):
            sl = slice(start, start + batch_size)
            h = model.features(ids[sl], lengths[sl])
            if model.variant == "full":
                z = heads.extreme_forward_full(h, model.params).data.astype(np.float64)
                top = _rank(z, k)
                for i, row in enumerate(top):
                    out_l.append(row.astype(np.int64))
                    out_s.append(_sigmoid(z[i, row]))
                continue
            meta = heads.meta_forward(h, model.params, model.state).data
            batch = heads.batch_shortlist(meta, top_k, model.tree)
            z = heads.extreme_forward_shortlist(h, model.params, model.state, batch).data.astype(np.float64)
            z = np.where(batch.valid(), z, -np.inf)
            for i in range(len(z)):
                n = int(batch.counts[i])
                pos = _rank(z[i : i + 1, :n], k)[0]
                out_l.append(batch.idx[i, pos].astype(np.int64))
                out_s.append(_sigmoid(z[i, pos]))
    return Predictions(out_l, out_s)


def evaluate_model(model, dataset, prop, top_k=None, k=max(KS)):
    preds = predict(model, dataset.ids, dataset.lengths, k, top_k)
    return evaluate(preds.labels, dataset.labels, prop), preds


def permute_words(ids, lengths, rng):
    """Shuffle the real tokens of every row independently; padding stays in place."""
    out = np.array(ids, copy=True)
    for i, n in enumerate(lengths):
        n = int(n)
        if n > 1:
            out[i, :n] = out[i, rng.permutation(n)]
    return out


def _mean_sd(reports):
    keys = reports[0].to_dict().keys()
    stats = {}
    for key in keys:
        vals = np.array([r.to_dict()[key] for r in reports], dtype=np.float64)
        stats[key] = (float(vals.mean()), float(vals.std()))
    return stats


def word_permutation_harness(model, dataset, prop, trials=10, seed=0, top_k=None):
    """Evaluate ``trials`` times on word-shuffled copies of ``dataset``.

    Returns ``(baseline_report, per_trial_reports, {metric: (mean, sd)})``.
    Trial t shuffles with ``default_rng([seed, 3, t])``.
    """
    base, _ = evaluate_model(model, dataset, prop, top_k)
    reports = []
    for t in range(trials):
        rng = np.random.default_rng([seed, 3, t])
        ids = permute_words(dataset.ids, dataset.lengths, rng)
        preds = predict(model, ids, dataset.lengths, max(KS), top_k)
        reports.append(evaluate(preds.labels, dataset.labels, prop))
    return base, reports, _mean_sd(reports)


def embedding_permutation_harness(train_fn, table, dataset, prop, trials=10, seed=0, top_k=None, perms=None):
    """Train one model per trial on a column-permuted copy of the embedding table.

    ``train_fn(table)`` must return a trained model. Trial t permutes with
    ``default_rng([seed, 4, t])`` unless explicit ``perms`` are given; the
    same permutation applies to every row, pretrained or random.
    Returns ``(per_trial_reports, {metric: (mean, sd)})``.
    """
    table = np.asarray(table)
    d = table.shape[1]
    if perms is None:
        perms = [np.random.default_rng([seed, 4, t]).permutation(d) for t in range(trials)]
    reports = []
    for perm in perms:
        model = train_fn(np.ascontiguousarray(table[:, np.asarray(perm)]))
        reports.append(evaluate_model(model, dataset, prop, top_k)[0])
    return reports, _mean_sd(reports)
