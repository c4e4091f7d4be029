"""Encoder plus heads, with checkpoint round-tripping."""
from dataclasses import asdict

import numpy as np

from . import encoder, heads
from . import tensor as T
from .encoder import EncoderConfig
from .errors import ConfigError
from .label_tree import LabelTree
from .tensor import blob


class Model:
    """All learnable tensors of one trained classifier.

    ``variant`` is ``"full"`` (extreme head over all labels) or ``"plus"``
    (meta head over clusters, extreme head over the shortlist).
    """

    def __init__(self, variant, enc_cfg, num_labels, params, state=None, tree=None):
        if variant not in ("full", "plus"):
            raise ConfigError(f"unknown variant {variant!r}")
        if variant == "plus" and tree is None:
            raise ConfigError("the plus variant needs a label tree")
        self.variant = variant
        self.enc_cfg = enc_cfg
        self.num_labels = num_labels
        self.tree = tree
        self.params = {k: v if isinstance(v, T.Tensor) else T.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
        self.state = {k: np.asarray(v, dtype=np.float32) for k, v in (state or {}).items()}

    @property
    def num_clusters(self):
        return self.tree.num_clusters if self.tree is not None else 0

    @classmethod
    def create(cls, variant, enc_cfg, table, num_labels, tree=None, seed=0):
        """Fresh parameters; ``table`` is the initial (V, d) embedding array."""
        rng = np.random.default_rng([seed, 1])
        enc = encoder.init_encoder_params(enc_cfg, table, rng)
        hp, state = heads.init_head_params(
            variant, enc_cfg.feature_len(), num_labels, tree.num_clusters if tree is not None else 0, rng
        )
        return cls(variant, enc_cfg, num_labels, {**enc, **hp}, state, tree)

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def features(self, ids, lengths):
        return encoder.forward(ids, lengths, self.params, self.enc_cfg)

    def astype(self, dtype):
        """Independent copy with every tensor stored as ``dtype`` (float64 for gradient checks)."""
        params = {k: T.Tensor(v.data.astype(dtype), requires_grad=True, name=k, dtype=dtype) for k, v in self.params.items()}
        m = Model(self.variant, self.enc_cfg, self.num_labels, params, None, self.tree)
        m.state = {k: v.astype(dtype) for k, v in self.state.items()}
        return m

    def refresh_spectral(self):
        """One power-iteration step per normalized matrix, from its current weights."""
        for tag in ("rm", "re"):
            key = f"head.u_{tag}"
            if key in self.state:
                W = self.params["head.R" + tag[1]].data
                u, _ = heads.power_iteration(W, self.state[key])
                self.state[key] = u.astype(self.state[key].dtype)

    def describe(self):
        return {
            "variant": self.variant,
            "encoder": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.enc_cfg).items()},
            "num_labels": self.num_labels,
            "num_clusters": self.num_clusters,
            "vocab_size": int(self.params["enc.emb"].shape[0]),
        }

    def tensors(self):
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.state)
        if self.tree is not None:
            out["tree.cluster_of"] = self.tree.cluster_of.astype(np.float32)
        return out

    @classmethod
    def from_tensors(cls, tensors, desc):
        enc_cfg = EncoderConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in desc["encoder"].items()})
        tree = None
        if "tree.cluster_of" in tensors:
            tree = LabelTree.from_assignment(tensors["tree.cluster_of"].astype(np.int64), desc["num_clusters"])
        params = {k: v for k, v in tensors.items() if k.startswith(("enc.", "head.")) and not k.startswith("head.u_")}
        state = {k: v for k, v in tensors.items() if k.startswith("head.u_")}
        return cls(desc["variant"], enc_cfg, desc["num_labels"], params, state, tree)

    def save(self, path, meta=None):
        blob.save(path, self.tensors(), {"model": self.describe(), **(meta or {})})

    @classmethod
    def load(cls, path):
        tensors, meta = blob.load(path)
        return cls.from_tensors(tensors, meta["model"]), meta, tensors
