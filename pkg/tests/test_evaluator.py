import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shortxc import evaluator, ingest
from shortxc import tensor as T
from shortxc.errors import ContractError
from shortxc.evaluator import PropensityModel, precision_at_k, psp_at_k
from shortxc.trainer import Adam, train_step_full

from conftest import random_batch, small_model
from oracles import precision_brute, propensity_formula, psp_exhaustive, topk_sort


# ---- precision ----------------------------------------------------------------------------


def test_precision_examples():
    assert precision_at_k({1, 2}, [1, 5, 2], 1) == 1.0
    assert precision_at_k({1, 2}, [1, 5, 2], 3) == pytest.approx(2 / 3)
    assert precision_at_k({7}, [1, 5, 2], 3) == 0.0
    # a short ranking counts its missing slots as misses
    assert precision_at_k({1, 2}, [1], 5) == pytest.approx(0.2)


def test_duplicate_ranking_rejected():
    with pytest.raises(ContractError):
        precision_at_k({1}, [1, 1, 2], 3)
    with pytest.raises(ContractError):
        psp_at_k([1], [3, 3], 1, PropensityModel.uniform(4))


@settings(max_examples=300, deadline=None)
@given(st.sets(st.integers(0, 30), max_size=6), st.permutations(list(range(31))), st.integers(1, 10), st.integers(0, 31))
def test_precision_matches_brute_force(y, perm, k, n):
    ranked = perm[:n]
    assert precision_at_k(y, ranked, k) == precision_brute(y, ranked, k)


# ---- propensity ---------------------------------------------------------------------------


def test_propensity_frozen_values():
    assert PropensityModel([3], 100).p[0] == pytest.approx(0.2770611676750578, rel=1e-12)
    assert PropensityModel([0], 1000, A=0.6, B=2.6).p[0] == pytest.approx(0.12222578383333758, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 10**6), st.floats(0.1, 1.0), st.floats(0.5, 5.0))
def test_propensity_matches_formula(freq, n, A, B):
    p = PropensityModel([freq], n, A, B).p[0]
    assert p == pytest.approx(propensity_formula(freq, n, A, B), rel=1e-12)
    assert 0 < p < 1


def test_propensity_grows_with_frequency():
    p = PropensityModel([0, 1, 10, 1000], 500).p
    assert np.all(np.diff(p) > 0)


def test_propensity_from_dataset(toy_data):
    train, _ = toy_data
    prop = PropensityModel.from_dataset(train)
    assert len(prop) == 64
    l = 5
    freq = sum(l in y for y in train.labels)
    assert prop.p[l] == pytest.approx(propensity_formula(freq, len(train), 0.55, 1.5), rel=1e-12)


def test_zero_propensity_rejected():
    prop = PropensityModel.uniform(3)
    prop.p[1] = 0.0
    with pytest.raises(ContractError):
        psp_at_k([1], [1], 1, prop)


# ---- propensity-scored precision ----------------------------------------------------------


def test_psp_single_positive_ranked_first():
    prop = PropensityModel.uniform(4)
    prop.p[2] = 0.5
    assert psp_at_k([2], [2, 0, 1], 1, prop) == 1.0
    assert psp_at_k([2], [0, 2, 1], 1, prop) == 0.0
    assert psp_at_k([2], [0, 2, 1], 3, prop) == 1.0


def test_psp_weights_rare_labels():
    prop = PropensityModel.uniform(3)
    prop.p[:] = [1.0, 0.25, 1.0]
    # ideal top-1 takes the rare label (weight 4); the head label alone gets 1/4 of it
    assert psp_at_k([0, 1], [0, 1, 2], 1, prop) == pytest.approx(0.25)
    assert psp_at_k([0, 1], [1, 0, 2], 1, prop) == pytest.approx(1.0)


@settings(max_examples=200, deadline=None)
@given(st.sets(st.integers(0, 20), min_size=1, max_size=6), st.permutations(list(range(21))), st.integers(1, 8))
def test_psp_with_unit_propensity_is_normalized_precision(y, ranked, k):
    prop = PropensityModel.uniform(21)
    want = precision_at_k(y, ranked, k) * k / min(k, len(y))
    assert psp_at_k(list(y), ranked, k, prop) == pytest.approx(want, abs=1e-12)


def test_psp_exhaustive_three_label_oracle():
    import itertools

    p = np.array([0.9, 0.3, 0.6])
    prop = PropensityModel.uniform(3)
    prop.p[:] = p
    for y in ([0], [1, 2], [0, 2]):
        for ranked in itertools.permutations(range(3)):
            for k in (1, 2, 3):
                want = psp_exhaustive(set(y), list(ranked), k, p, list(range(3)))
                assert abs(psp_at_k(y, ranked, k, prop) - want) < 1e-12


# ---- aggregation and reports --------------------------------------------------------------


def test_evaluate_skips_unlabeled_instances():
    rep = evaluator.evaluate([[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]], [np.array([0]), np.array([], dtype=int)], PropensityModel.uniform(10))
    assert rep.num_instances == 2 and rep.num_scored == 1
    assert rep.precision[1] == 1.0 and rep.precision[5] == pytest.approx(0.2)


def test_report_format():
    rep = evaluator.evaluate([[0, 1, 2, 3, 4]], [np.array([0, 9])], PropensityModel.uniform(10))
    lines = rep.format().splitlines()
    assert [l.split(":")[0] for l in lines] == ["P@1", "P@3", "P@5", "PSP@1", "PSP@3", "PSP@5", "num_instances", "num_scored"]
    assert lines[0] == "P@1: 1.000000" and lines[2] == "P@5: 0.200000" and lines[-1] == "num_scored: 1"


def test_predictions_file_format(tmp_path):
    preds = evaluator.Predictions([np.array([4, 2])], [np.array([0.75, 0.5])])
    preds.write(tmp_path / "p.txt")
    assert (tmp_path / "p.txt").read_text() == "4:0.750000 2:0.500000\n"


# ---- prediction ---------------------------------------------------------------------------


def _trained_small(variant, steps=30, seed=0):
    model = small_model(variant, seed=seed)
    ids, lengths = random_batch(np.random.default_rng(seed), 16, 8, 40)
    labels = [np.array([i % 32, (7 * i + 1) % 32]) for i in range(16)]
    opt = Adam(model.params)
    from shortxc.trainer import train_step_plus, TrainConfig

    for _ in range(steps):
        if variant == "full":
            train_step_full(model, opt, ids, lengths, labels, 0.01)
        else:
            cfg = TrainConfig(variant="plus", top_k=2, num_clusters=8)
            train_step_plus(model, opt, ids, lengths, labels, cfg, 10, 0.01)
    return model, ids, lengths


def test_full_prediction_matches_sorted_logits():
    from shortxc import heads

    model, ids, lengths = _trained_small("full")
    preds = evaluator.predict(model, ids, lengths, k=5)
    with T.no_grad():
        z = heads.extreme_forward_full(model.features(ids, lengths), model.params).data
    for i, row in enumerate(preds.labels):
        assert row.tolist() == topk_sort(list(z[i]), 5)
        np.testing.assert_allclose(preds.scores[i], 1 / (1 + np.exp(-z[i, row])), rtol=1e-6)
        assert np.all(np.diff(preds.scores[i]) <= 0)


def test_plus_with_every_cluster_matches_full_extreme_ranking():
    from shortxc import heads

    model, ids, lengths = _trained_small("plus")
    preds = evaluator.predict(model, ids, lengths, k=5, top_k=model.num_clusters)
    with T.no_grad():
        h = model.features(ids, lengths)
        all_labels = heads.BatchShortlist.from_lists([heads.Shortlist(np.arange(32), np.zeros(32))] * len(ids))
        z = heads.extreme_forward_shortlist(h, model.params, model.state, all_labels).data
    for i, row in enumerate(preds.labels):
        assert row.tolist() == topk_sort(list(z[i]), 5)


def test_plus_prediction_stays_inside_shortlist():
    from shortxc import heads

    model, ids, lengths = _trained_small("plus")
    preds = evaluator.predict(model, ids, lengths, k=5, top_k=1)
    with T.no_grad():
        meta = heads.meta_forward(model.features(ids, lengths), model.params, model.state).data
    for i, row in enumerate(preds.labels):
        best = int(np.argmax(meta[i]))
        # one cluster of the 32 % 8 tree holds 4 labels, fewer than k
        assert len(row) == 4 and set(model.tree.cluster_of[row]) == {best}


def test_plus_prediction_needs_top_k():
    model, ids, lengths = _trained_small("plus", steps=0)
    with pytest.raises(ContractError):
        evaluator.predict(model, ids, lengths)


def test_prediction_independent_of_batch_size():
    model, ids, lengths = _trained_small("full")
    a = evaluator.predict(model, ids, lengths, batch_size=256)
    b = evaluator.predict(model, ids, lengths, batch_size=3)
    assert [r.tolist() for r in a.labels] == [r.tolist() for r in b.labels]
    for x, y in zip(a.scores, b.scores):
        np.testing.assert_allclose(x, y, rtol=1e-5)


def test_ranking_invariant_under_monotone_score_map():
    z = np.random.default_rng(0).standard_normal((5, 20))
    assert evaluator._rank(z, 5).tolist() == evaluator._rank(np.tanh(z) * 3 + 1, 5).tolist()


# ---- harnesses ----------------------------------------------------------------------------


def test_permute_words_keeps_padding_and_multiset():
    rng = np.random.default_rng(0)
    ids, lengths = random_batch(rng, 20, 8, 40)
    out = evaluator.permute_words(ids, lengths, np.random.default_rng(1))
    for i, n in enumerate(lengths):
        assert sorted(out[i, :n]) == sorted(ids[i, :n])
        assert np.all(out[i, n:] == 0)


def test_single_word_queries_unchanged_by_word_harness():
    model, ids, lengths = _trained_small("full")
    lengths = np.ones_like(lengths)
    ids[:, 1:] = 0
    ds = ingest.Dataset(ids, lengths, [np.array([i % 32]) for i in range(len(ids))], 32)
    base, reports, stats = evaluator.word_permutation_harness(model, ds, PropensityModel.uniform(32), trials=3)
    assert all(r.to_dict() == base.to_dict() for r in reports)
    assert stats["P@5"][1] == 0.0


def test_word_harness_trials_are_seeded():
    model, ids, lengths = _trained_small("full")
    ds = ingest.Dataset(ids, lengths, [np.array([i % 32]) for i in range(len(ids))], 32)
    prop = PropensityModel.uniform(32)
    a = evaluator.word_permutation_harness(model, ds, prop, trials=3, seed=5)[1]
    b = evaluator.word_permutation_harness(model, ds, prop, trials=3, seed=5)[1]
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]


def test_identity_embedding_permutation_is_bit_exact():
    model, ids, lengths = _trained_small("full", steps=0)
    table = model.params["enc.emb"].data.copy()
    labels = [np.array([i % 32]) for i in range(len(ids))]
    ds = ingest.Dataset(ids, lengths, labels, 32)
    prop = PropensityModel.uniform(32)
    seen = []

    def train_fn(t):
        seen.append(t)
        m = small_model("full")
        m.params["enc.emb"].data[:] = t
        opt = Adam(m.params)
        for _ in range(5):
            train_step_full(m, opt, ids, lengths, labels, 0.01)
        return m

    reports, _ = evaluator.embedding_permutation_harness(train_fn, table, ds, prop, perms=[np.arange(32)])
    direct = evaluator.evaluate_model(train_fn(table), ds, prop)[0]
    assert seen[0].tobytes() == table.tobytes()
    assert reports[0].to_dict() == direct.to_dict()


def test_embedding_harness_default_permutations():
    table = np.arange(12, dtype=np.float32).reshape(3, 4)
    seen = []
    model, ids, lengths = _trained_small("full", steps=0)
    ds = ingest.Dataset(ids, lengths, [np.array([0])] * len(ids), 32)

    def train_fn(t):
        seen.append(t)
        return model

    evaluator.embedding_permutation_harness(train_fn, table, ds, PropensityModel.uniform(32), trials=2, seed=1)
    for t, perm in enumerate(np.random.default_rng([1, 4, t]).permutation(4) for t in range(2)):
        assert np.array_equal(seen[t], table[:, perm])
