"""Training loops for both variants.

Plus-variant step, per batch:

1. ``h = encoder(x)``; meta logits over clusters; meta BCE against the
   clusters of the positive labels.
2. Shortlist = labels of the top-K clusters, plus any missing positives.
3. During the first ``detach_fraction`` of the epochs the extreme head sees
   ``detach(h)``, so only the meta loss reaches the encoder.
4. Extreme BCE on the shortlist; total loss = meta + extreme; backward.
5. Power-iteration refresh of the spectral-norm states, then Adam update.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import heads
from . import tensor as T
from .errors import ConfigError, ContractError
from .label_tree import cluster_indicator
from .tensor import blob

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 42
    batch_size: int = 128
    lr_max: float = 0.005
    top_k: int = 800
    num_clusters: int = 65536
    seed: int = 0
    variant: str = "full"
    detach_fraction: float = 0.25
    warmup_fraction: float = 0.1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def validate(self):
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.variant not in ("full", "plus"):
            raise ConfigError(f"variant must be 'full' or 'plus', got {self.variant!r}")
        if self.variant == "plus" and not 0 < self.top_k <= self.num_clusters:
            raise ConfigError(f"need 0 < top_k <= num_clusters, got {self.top_k} / {self.num_clusters}")
        if not 0.0 <= self.detach_fraction <= 1.0:
            raise ConfigError("detach_fraction must lie in [0, 1]")
        return self

    def is_detached(self, epoch):
        """``epoch`` counts from 1."""
        return epoch <= self.detach_fraction * self.epochs


def cyclic_lr(step, total_steps, lr_max, warmup_fraction=0.1):
    """One triangular cycle: 0 -> lr_max over the first 10% of steps, then linearly back to 0."""
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    peak = max(1, int(warmup_fraction * total_steps))
    last = total_steps - 1
    if step <= peak:
        return lr_max * step / peak
    if last <= peak:
        return lr_max
    return lr_max * (last - step) / (last - peak)


def bce(y, logits, weight=None):
    """Summed binary cross-entropy of logits against 0/1 targets (a 1-element tensor)."""
    z = logits if isinstance(logits, T.Tensor) else T.Tensor(np.asarray(logits, dtype=np.float64))
    return T.bce_with_logits(z, np.asarray(y, dtype=np.float64), weight)


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.betas = tuple(betas)
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def update(self, params, lr):
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, p in params.items():
            if p.grad is None:
                continue
            g, m, v = p.grad, self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p.data -= (lr / c1) * m / denom

    def tensors(self):
        out = {}
        for k in self.m:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_tensors(self, tensors, step_count):
        for k in self.m:
            self.m[k] = tensors[f"opt.m.{k}"].astype(self.m[k].dtype)
            self.v[k] = tensors[f"opt.v.{k}"].astype(self.v[k].dtype)
        self.step_count = step_count


def label_indicator(labels, num_labels):
    Y = np.zeros((len(labels), num_labels), dtype=np.float64)
    for i, y in enumerate(labels):
        Y[i, y] = 1.0
    return Y


def top1_precision(logits, targets, valid=None):
    """Mean over rows of whether the arg-max (ties to lower index) is a positive target."""
    z = np.asarray(logits, dtype=np.float64)
    if valid is not None:
        z = np.where(valid, z, -np.inf)
    best = np.argmax(z, axis=1)
    return float(np.mean(targets[np.arange(len(best)), best] > 0))


@dataclass
class PlusForward:
    loss: T.Tensor
    meta_loss: T.Tensor
    ext_loss: T.Tensor
    h: T.Tensor
    shortlist: heads.BatchShortlist
    meta_logits: T.Tensor
    ext_logits: T.Tensor
    meta_targets: np.ndarray = field(repr=False)


def plus_forward(model, ids, lengths, labels, detached, K, shortlist=None):
    """Loss graph of one plus-variant batch. A precomputed ``shortlist`` is reused as is."""
    h = model.features(ids, lengths)
    meta_logits = heads.meta_forward(h, model.params, model.state)
    ym = np.stack([cluster_indicator(y, model.tree) for y in labels])
    meta_loss = T.bce_with_logits(meta_logits, ym)
    if shortlist is None:
        shortlist = heads.batch_shortlist(meta_logits.data, K, model.tree, positives=labels)
    h_ext = T.detach(h) if detached else h
    ext_logits = heads.extreme_forward_shortlist(h_ext, model.params, model.state, shortlist)
    ext_loss = T.bce_with_logits(ext_logits, shortlist.positive, shortlist.valid().astype(np.float64))
    total = T.add(meta_loss, ext_loss)
    return PlusForward(total, meta_loss, ext_loss, h, shortlist, meta_logits, ext_logits, ym)


def full_forward(model, ids, lengths, labels):
    h = model.features(ids, lengths)
    logits = heads.extreme_forward_full(h, model.params)
    Y = label_indicator(labels, model.num_labels)
    return T.bce_with_logits(logits, Y), logits, Y


def _check_finite(loss):
    if not math.isfinite(loss.item()):
        raise ContractError("non-finite training loss")


def train_step_plus(model, opt, ids, lengths, labels, cfg, epoch, lr, on_forward=None):
    """One optimizer step; returns ``(loss, meta_p1, ext_p1)`` as floats.

    ``on_forward(fw)`` sees the :class:`PlusForward` before backward.
    """
    model.zero_grad()
    fw = plus_forward(model, ids, lengths, labels, cfg.is_detached(epoch), cfg.top_k)
    if on_forward is not None:
        on_forward(fw)
    _check_finite(fw.loss)
    T.backward(fw.loss)
    model.refresh_spectral()
    opt.update(model.params, lr)
    meta_p1 = top1_precision(fw.meta_logits.data, fw.meta_targets)
    ext_p1 = top1_precision(fw.ext_logits.data, fw.shortlist.positive, fw.shortlist.valid())
    return fw.loss.item(), meta_p1, ext_p1


def train_step_full(model, opt, ids, lengths, labels, lr):
    model.zero_grad()
    loss, logits, Y = full_forward(model, ids, lengths, labels)
    _check_finite(loss)
    T.backward(loss)
    opt.update(model.params, lr)
    return loss.item(), float("nan"), top1_precision(logits.data, Y)


def steps_per_epoch(n, batch_size):
    return (n + batch_size - 1) // batch_size


def epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, 2, epoch]).permutation(n)


class Trainer:
    """Runs the epoch loop, writes the progress log and checkpoints.

    ``progress`` receives one CSV line per epoch: ``epoch,meta_P@1,ext_P@1,loss``.
    ``on_step(trainer, rows, result)`` runs after every step and
    ``on_forward(fw)`` inside every plus-variant step.
    """

    def __init__(self, model, dataset, cfg, progress=None, on_step=None, on_forward=None):
        self.model = model
        self.data = dataset
        self.cfg = cfg.validate()
        if cfg.variant != model.variant:
            raise ConfigError(f"config variant {cfg.variant!r} does not match model {model.variant!r}")
        if any(len(y) == 0 for y in dataset.labels):
            raise ConfigError("training instances must have at least one label")
        self.opt = Adam(model.params, cfg.betas, cfg.eps)
        self.progress = progress
        self.on_step = on_step
        self.on_forward = on_forward
        self.epoch = 0
        self.spe = steps_per_epoch(len(dataset), cfg.batch_size)
        self.total_steps = cfg.epochs * self.spe
        self.history = []

    def run_epoch(self):
        self.epoch += 1
        e, cfg, data = self.epoch, self.cfg, self.data
        order = epoch_order(len(data), cfg.seed, e)
        sums = np.zeros(3)
        for b in range(self.spe):
            rows = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            ids, lengths = data.ids[rows], data.lengths[rows]
            labels = [data.labels[r] for r in rows]
            lr = cyclic_lr(self.opt.step_count, self.total_steps, cfg.lr_max, cfg.warmup_fraction)
            if cfg.variant == "plus":
                out = train_step_plus(self.model, self.opt, ids, lengths, labels, cfg, e, lr, self.on_forward)
            else:
                out = train_step_full(self.model, self.opt, ids, lengths, labels, lr)
            sums += np.array(out) * len(rows)
            if self.on_step is not None:
                self.on_step(self, rows, out)
        loss, meta_p1, ext_p1 = sums / len(data)
        rec = {"epoch": e, "meta_P@1": meta_p1, "ext_P@1": ext_p1, "loss": loss}
        self.history.append(rec)
        if self.progress is not None:
            self.progress.write(f"{e},{meta_p1:.6f},{ext_p1:.6f},{loss:.6f}\n")
            self.progress.flush()
        log.info("epoch %d loss %.4f meta_P@1 %.4f ext_P@1 %.4f", e, loss, meta_p1, ext_p1)
        return rec

    def fit(self, checkpoint_path=None):
        while self.epoch < self.cfg.epochs:
            self.run_epoch()
            if checkpoint_path is not None:
                self.save(checkpoint_path)
        return self.history

    def save(self, path, extra=None):
        tensors = self.model.tensors()
        tensors.update(self.opt.tensors())
        meta = {
            "model": self.model.describe(),
            "train": _config_echo(self.cfg),
            "epoch": self.epoch,
            "step": self.opt.step_count,
            **(extra or {}),
        }
        blob.save(path, tensors, meta)

    def restore(self, path):
        """Resume from a checkpoint written by :meth:`save` (epoch granularity)."""
        tensors, meta = blob.load(path)
        if meta["model"] != self.model.describe():
            raise ConfigError("checkpoint model does not match the configured model")
        if meta["train"] != _config_echo(self.cfg):
            raise ConfigError("checkpoint training config does not match")
        for k, p in self.model.params.items():
            p.data = tensors[k].astype(p.data.dtype)
        for k in self.model.state:
            self.model.state[k] = tensors[k].astype(np.float32)
        self.opt.load_tensors(tensors, meta["step"])
        self.epoch = meta["epoch"]
        return meta


def _config_echo(cfg):
    return json.loads(json.dumps(asdict(cfg)))
