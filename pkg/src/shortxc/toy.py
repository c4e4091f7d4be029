"""Seeded synthetic short-text XML dataset.

64 labels in 8 groups of 8. The 200-word vocabulary holds 2 private words per
label, 4 shared words per group and 40 background words. A query picks one
group, 1-3 of its labels, one or two private words per label, one or two
group words, up to three background words and an occasional stopword, in
random order. Positives are therefore recoverable from the words alone.
"""
from pathlib import Path

import numpy as np

from .ingest import write_label_file

NUM_LABELS = 64
NUM_GROUPS = 8
NUM_TRAIN = 512
NUM_TEST = 128
_FILLER = ("the", "of", "for", "and", "with", "a", "in")


def vocabulary_words():
    private = [f"lab{l:02d}{suffix}" for l in range(NUM_LABELS) for suffix in ("a", "b")]
    group = [f"grp{g}{suffix}" for g in range(NUM_GROUPS) for suffix in "abcd"]
    background = [f"bg{i:02d}" for i in range(40)]
    return private, group, background


def _query(rng, private, group, background):
    per = NUM_LABELS // NUM_GROUPS
    g = int(rng.integers(NUM_GROUPS))
    k = int(rng.integers(1, 4))
    labels = np.sort(rng.choice(np.arange(g * per, (g + 1) * per), size=k, replace=False))
    words = []
    for l in labels:
        n = int(rng.integers(1, 3))
        words += list(rng.choice(private[2 * l : 2 * l + 2], size=n, replace=False))
    words += list(rng.choice(group[4 * g : 4 * g + 4], size=int(rng.integers(1, 3)), replace=False))
    words += list(rng.choice(background, size=int(rng.integers(0, 4)), replace=False))
    if rng.random() < 0.3:
        words.append(_FILLER[int(rng.integers(len(_FILLER)))])
    rng.shuffle(words)
    return " ".join(words), labels


def make_toy(seed=0, num_train=NUM_TRAIN, num_test=NUM_TEST):
    """Returns ``(train_texts, train_labels, test_texts, test_labels)``."""
    rng = np.random.default_rng(seed)
    private, group, background = vocabulary_words()
    splits = []
    for n in (num_train, num_test):
        texts, labels = [], []
        for _ in range(n):
            t, y = _query(rng, private, group, background)
            texts.append(t)
            labels.append(y)
        splits += [texts, labels]
    return tuple(splits)


def write_toy(directory, seed=0):
    """Write ``trn_X.txt``, ``trn_Y.txt``, ``tst_X.txt``, ``tst_Y.txt``; returns the paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    trX, trY, teX, teY = make_toy(seed)
    paths = {}
    for split, texts, labels in (("trn", trX, trY), ("tst", teX, teY)):
        tx, ty = d / f"{split}_X.txt", d / f"{split}_Y.txt"
        tx.write_text("\n".join(texts) + "\n", encoding="utf-8")
        write_label_file(ty, labels, NUM_LABELS, num_features=200)
        paths[f"{split}_text"], paths[f"{split}_labels"] = tx, ty
    return paths


def bundled_toy_dir():
    return Path(__file__).parent / "data" / "toy"
