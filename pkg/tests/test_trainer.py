import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shortxc import ingest
from shortxc import tensor as T
from shortxc.encoder import EncoderConfig
from shortxc.errors import ConfigError, ContractError
from shortxc.label_tree import LabelTree
from shortxc.model import Model
from shortxc.trainer import (
    Adam,
    TrainConfig,
    Trainer,
    bce,
    cyclic_lr,
    full_forward,
    plus_forward,
    train_step_full,
    train_step_plus,
)

from conftest import random_batch, small_model

LN2 = math.log(2.0)


# ---- loss ---------------------------------------------------------------------------------


def test_bce_positive_at_zero_logit():
    assert bce([1.0], [0.0]).item() == pytest.approx(LN2, abs=1e-6)


def test_bce_negative_at_zero_logit():
    assert bce([0.0], [0.0]).item() == pytest.approx(LN2, abs=1e-6)


def test_bce_two_labels():
    logit = math.log(0.9 / 0.1)
    assert bce([1.0, 0.0], [logit, -logit]).item() == pytest.approx(0.2107210313156526, abs=1e-6)


def test_bce_sums_labels_and_averages_rows():
    z = np.zeros((4, 3))
    assert bce(np.zeros((4, 3)), z).item() == pytest.approx(3 * LN2, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=8), st.integers(0, 2**31))
def test_bce_finite_and_matches_direct_formula(z, seed):
    y = (np.random.default_rng(seed).random(len(z)) < 0.5).astype(float)
    out = bce(y, z).item()
    assert math.isfinite(out) and out >= 0
    direct = sum(max(v, 0) - v * t + math.log1p(math.exp(-abs(v))) for v, t in zip(z, y))
    assert out == pytest.approx(direct, rel=1e-5, abs=1e-5)


# ---- learning rate ------------------------------------------------------------------------


def test_cyclic_lr_shape():
    total = 1000
    assert cyclic_lr(0, total, 0.008) == 0.0
    assert cyclic_lr(100, total, 0.008) == pytest.approx(0.008)
    assert cyclic_lr(50, total, 0.008) == pytest.approx(0.004)
    assert cyclic_lr(total - 1, total, 0.008) < 0.008 / total
    values = [cyclic_lr(s, total, 0.008) for s in range(total)]
    assert max(values) == pytest.approx(0.008) and int(np.argmax(values)) == 100


def test_cyclic_lr_bounds():
    with pytest.raises(ConfigError):
        cyclic_lr(10, 10, 0.1)
    with pytest.raises(ConfigError):
        cyclic_lr(-1, 10, 0.1)


def test_plus_presets_peak_learning_rate():
    from shortxc.config import PRESETS

    assert {PRESETS[k]["lr_max"] for k in PRESETS if k.endswith("-plus") and not k.startswith("toy")} == {0.008}
    assert {PRESETS[k]["lr_max"] for k in PRESETS if k.endswith("-full") and not k.startswith("toy")} == {0.005}


# ---- config -------------------------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(variant="plus", top_k=9, num_clusters=8).validate()
    with pytest.raises(ConfigError):
        TrainConfig(variant="other").validate()


def test_detach_schedule():
    cfg = TrainConfig(epochs=10)
    assert [e for e in range(1, 11) if cfg.is_detached(e)] == [1, 2]
    assert [e for e in range(1, 43) if TrainConfig(epochs=42).is_detached(e)] == list(range(1, 11))


# ---- optimizer ----------------------------------------------------------------------------


def test_adam_matches_hand_recurrence():
    p = {"w": T.Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)}
    opt = Adam(p)
    grads = [np.array([0.5, -1.0]), np.array([0.1, 0.3]), np.array([-0.2, 0.0])]
    m = np.zeros(2)
    v = np.zeros(2)
    w = np.array([1.0, -2.0])
    for t, g in enumerate(grads, 1):
        p["w"].grad = g.copy()
        opt.update(p, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, w, rtol=1e-12)
    assert opt.step_count == 3


# ---- steps --------------------------------------------------------------------------------


def test_full_step_overfits_one_instance():
    model = small_model("full", num_labels=16)
    opt = Adam(model.params)
    ids, lengths = random_batch(np.random.default_rng(0), 1, 8, 40)
    labels = [np.array([3, 11])]
    for _ in range(200):
        loss = train_step_full(model, opt, ids, lengths, labels, 0.01)[0]
    assert loss < 1e-2


def test_full_loss_decreases_on_toy(toy_data, toy_table):
    train, _ = toy_data
    model = Model.create("full", EncoderConfig(seq_len=16, embed_dim=64, proj_dim=16), toy_table, 64)
    opt = Adam(model.params)
    batch = train.subset(np.arange(32))
    losses = [train_step_full(model, opt, batch.ids, batch.lengths, batch.labels, 1e-3)[0] for _ in range(11)]
    drops = sum(b < a for a, b in zip(losses, losses[1:]))
    assert drops >= 8


def test_single_step_total_is_meta_plus_extreme():
    model = small_model("plus")
    ids, lengths = random_batch(np.random.default_rng(1), 5, 8, 40)
    labels = [np.array([i, 31 - i]) for i in range(5)]
    fw = plus_forward(model, ids, lengths, labels, detached=False, K=2)
    assert fw.loss.item() == pytest.approx(fw.meta_loss.item() + fw.ext_loss.item(), rel=1e-6)

    # the same two losses rebuilt from scratch
    from shortxc import heads
    from shortxc.label_tree import cluster_indicator

    h = model.features(ids, lengths)
    ym = np.stack([cluster_indicator(y, model.tree) for y in labels])
    meta = T.bce_with_logits(heads.meta_forward(h, model.params, model.state), ym).item()
    ext_z = heads.extreme_forward_shortlist(h, model.params, model.state, fw.shortlist)
    ext = T.bce_with_logits(ext_z, fw.shortlist.positive, fw.shortlist.valid().astype(float)).item()
    assert meta == pytest.approx(fw.meta_loss.item(), rel=1e-6)
    assert ext == pytest.approx(fw.ext_loss.item(), rel=1e-6)


def _encoder_grads(model):
    return {k: p.grad.copy() for k, p in model.params.items() if k.startswith("enc.") and p.grad is not None}


def test_detached_step_encoder_grads_equal_meta_only_tape():
    model = small_model("plus")
    ids, lengths = random_batch(np.random.default_rng(2), 6, 8, 40)
    labels = [np.array([i % 32, (5 * i + 3) % 32]) for i in range(6)]

    def grads(which, detached):
        model.zero_grad()
        fw = plus_forward(model, ids, lengths, labels, detached, 2)
        T.backward(fw.loss if which == "total" else fw.meta_loss)
        return _encoder_grads(model), fw

    meta_only, _ = grads("meta", True)
    detached, fw = grads("total", True)
    attached, _ = grads("total", False)
    for k in meta_only:
        assert np.array_equal(meta_only[k], detached[k]), k
    assert any(not np.array_equal(meta_only[k], attached[k]) for k in meta_only)
    # the extreme head itself trains either way
    assert np.any(model.params["head.We"].grad)


def test_full_step_zero_label_instances_rejected():
    model = small_model("full", num_labels=4)
    ds = ingest.Dataset(np.ones((2, 8), dtype=np.int32), np.array([8, 8]), [np.array([1]), np.array([], dtype=np.int64)], 4)
    with pytest.raises(ConfigError):
        Trainer(model, ds, TrainConfig(epochs=1, batch_size=2))


def test_non_finite_loss_is_refused():
    model = small_model("full", num_labels=4)
    model.params["head.W_b"].data[:] = np.float32(3e38)
    opt = Adam(model.params)
    ids, lengths = random_batch(np.random.default_rng(0), 2, 8, 40)
    with pytest.raises(ContractError), np.errstate(over="ignore", invalid="ignore"):
        train_step_full(model, opt, ids, lengths, [np.array([0]), np.array([1])], 1e-3)


# ---- trainer loop -------------------------------------------------------------------------


def _toy_model(toy_table, variant, tree=None):
    return Model.create(variant, EncoderConfig(seq_len=16, embed_dim=64, proj_dim=16), toy_table, 64, tree=tree, seed=0)


def _toy_tree():
    return LabelTree.from_assignment(np.arange(64) // 8, 8)


def test_loss_trajectory_deterministic(toy_data, toy_table):
    train, _ = toy_data
    runs = []
    for _ in range(2):
        cfg = TrainConfig(epochs=2, batch_size=32, lr_max=0.005, variant="plus", top_k=4, num_clusters=8)
        losses = []
        tr = Trainer(_toy_model(toy_table, "plus", _toy_tree()), train, cfg, on_step=lambda t, r, out: losses.append(out[0]))
        tr.fit()
        runs.append(losses)
    assert len(runs[0]) == 32 and runs[0] == runs[1]


def test_progress_log_lines(toy_data, toy_table):
    train, _ = toy_data
    buf = io.StringIO()
    cfg = TrainConfig(epochs=2, batch_size=64, variant="full")
    Trainer(_toy_model(toy_table, "full"), train.subset(np.arange(128)), cfg, progress=buf).fit()
    lines = buf.getvalue().splitlines()
    assert [l.split(",")[0] for l in lines] == ["1", "2"]
    assert all(len(l.split(",")) == 4 for l in lines)
    assert lines[0].split(",")[1] == "nan"


def test_resume_matches_uninterrupted_run(tmp_path, toy_data, toy_table):
    train, _ = toy_data
    data = train.subset(np.arange(96))
    cfg = TrainConfig(epochs=3, batch_size=32, variant="plus", top_k=4, num_clusters=8)
    straight = Trainer(_toy_model(toy_table, "plus", _toy_tree()), data, cfg)
    straight.fit()

    ckpt = tmp_path / "m.ckpt"
    first = Trainer(_toy_model(toy_table, "plus", _toy_tree()), data, cfg)
    first.run_epoch()
    first.save(ckpt)
    resumed = Trainer(_toy_model(toy_table, "plus", _toy_tree()), data, cfg)
    resumed.restore(ckpt)
    assert resumed.epoch == 1 and resumed.opt.step_count == 3
    resumed.fit()
    for k, p in straight.model.params.items():
        assert np.array_equal(p.data, resumed.model.params[k].data), k
    for k in straight.model.state:
        assert np.array_equal(straight.model.state[k], resumed.model.state[k])


def test_restore_refuses_other_config(tmp_path, toy_data, toy_table):
    train, _ = toy_data
    data = train.subset(np.arange(32))
    tr = Trainer(_toy_model(toy_table, "full"), data, TrainConfig(epochs=1, batch_size=32))
    tr.fit()
    tr.save(tmp_path / "m.ckpt")
    other = Trainer(_toy_model(toy_table, "full"), data, TrainConfig(epochs=1, batch_size=16))
    with pytest.raises(ConfigError):
        other.restore(tmp_path / "m.ckpt")


def test_checkpoint_round_trip(tmp_path, toy_table):
    model = _toy_model(toy_table, "plus", _toy_tree())
    model.save(tmp_path / "m.bin")
    back, meta, _ = Model.load(tmp_path / "m.bin")
    assert meta["model"] == model.describe()
    assert back.tree.cluster_of.tolist() == model.tree.cluster_of.tolist()
    for k in model.params:
        assert np.array_equal(back.params[k].data, model.params[k].data)


def test_variant_mismatch_refused(toy_data, toy_table):
    train, _ = toy_data
    with pytest.raises(ConfigError):
        Trainer(_toy_model(toy_table, "full"), train, TrainConfig(variant="plus", top_k=4, num_clusters=8))
