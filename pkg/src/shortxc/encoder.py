"""Query encoder: embedding lookup, two orthogonal attention layers, per-dimension
projection, then parallel convolutions along the embedding axis.

Shapes for one query (batch axis omitted)::

    E      (S, d)    embedded tokens, pad rows zero
    x_sa   (S, d)    word-axis attention, then embedding-axis attention
    x_enh  (p, d)    projection of every embedding column with one shared (p, S) map
    h_wi   (p, l_i)  conv with width w_i, stride 4, over the d axis
    h_f    (p * l_f,) conv width 16 stride 4 over the concatenated branches, flattened
"""
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class EncoderConfig:
    seq_len: int = 32
    embed_dim: int = 300
    proj_dim: int = 32
    branch_widths: tuple = (4, 8, 16)
    final_width: int = 16
    stride: int = 4

    def branch_lengths(self):
        return tuple(T.conv_out_len(self.embed_dim, w, self.stride) for w in self.branch_widths)

    def concat_length(self):
        return sum(self.branch_lengths())

    def final_length(self):
        return T.conv_out_len(self.concat_length(), self.final_width, self.stride)

    def feature_len(self):
        return self.proj_dim * self.final_length()

    def validate(self):
        if min(self.seq_len, self.embed_dim, self.proj_dim, self.stride) < 1:
            raise ConfigError(f"encoder dimensions must be positive: {self}")
        try:
            self.feature_len()
        except ValueError as exc:
            raise ConfigError(f"encoder shape chain is empty for {self}: {exc}") from exc
        return self


def _uniform(rng, shape, fan_in, fan_out=None, relu=False):
    """Glorot-uniform, or He-uniform for maps feeding a ReLU, so activations keep their scale."""
    if relu:
        bound = math.sqrt(6.0 / fan_in)
    else:
        bound = math.sqrt(6.0 / (fan_in + (fan_out or fan_in)))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_encoder_params(cfg, table, rng):
    """Encoder parameters keyed by checkpoint name; ``table`` is the (V, d) embedding array."""
    cfg.validate()
    S, d, p = cfg.seq_len, cfg.embed_dim, cfg.proj_dim
    table = np.asarray(table, dtype=np.float32)
    if table.shape[1] != d:
        raise ConfigError(f"embedding table width {table.shape[1]} != embed_dim {d}")
    params = {"enc.emb": table.copy()}
    for tag, n in (("attn_w", d), ("attn_e", S)):
        for m in ("q", "k", "v"):
            params[f"enc.{tag}.W{m}"] = _uniform(rng, (n, n), n)
            params[f"enc.{tag}.b{m}"] = np.zeros(n, dtype=np.float32)
    params["enc.P"] = _uniform(rng, (p, S), S, p)
    params["enc.P_b"] = np.zeros(p, dtype=np.float32)
    for i, w in enumerate(cfg.branch_widths, 1):
        params[f"enc.V{i}"] = _uniform(rng, (p, p, w), p * w, relu=True)
        params[f"enc.V{i}_b"] = np.zeros(p, dtype=np.float32)
    params["enc.Vf"] = _uniform(rng, (p, p, cfg.final_width), p * cfg.final_width, relu=True)
    params["enc.Vf_b"] = np.zeros(p, dtype=np.float32)
    return params


def key_mask(lengths, seq_len):
    lengths = np.asarray(lengths)
    return np.arange(seq_len)[None, :] < lengths[:, None]


def attention(q, k, v, Wq, Wk, Wv, bq=None, bk=None, bv=None, mask=None):
    """Single-head scaled dot-product attention with learned projections.

    ``q``, ``k``, ``v`` are (a, b) or (B, a, b). ``mask`` marks admissible key
    positions, shape (a,) or (B, a); masked keys get zero weight.
    """
    if not (q.shape == k.shape == v.shape):
        raise ContractError(f"attention operands differ in shape: {q.shape}, {k.shape}, {v.shape}")
    b = q.shape[-1]
    Q = T.linear(q, Wq, bq)
    K = T.linear(k, Wk, bk)
    V = T.linear(v, Wv, bv)
    scores = T.scale(T.matmul(Q, T.transpose(K)), 1.0 / math.sqrt(b))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != q.shape[:-1]:
            raise ContractError(f"mask shape {mask.shape} does not match keys {q.shape[:-1]}")
        mask = mask[..., None, :]
    return T.matmul(T.softmax_rows(scores, mask), V)


def _attn(params, tag, q, k, v, mask=None):
    pre = f"enc.{tag}."
    return attention(
        q, k, v,
        params[pre + "Wq"], params[pre + "Wk"], params[pre + "Wv"],
        params[pre + "bq"], params[pre + "bk"], params[pre + "bv"],
        mask,
    )


def word_attention(E, params, mask):
    """Attention across word positions (pad keys masked), pad rows zeroed after.

    Positions past the longest query in the batch are all padding, so the
    layer runs on the leading block only and is zero-extended back to S.
    """
    mask = np.asarray(mask, dtype=bool)
    S = mask.shape[-1]
    n = int(mask.sum(axis=-1).max()) if mask.ndim == 2 else int(mask.sum())
    if n < S and mask.ndim == 2 and not mask[:, n:].any():
        m = mask[:, :n]
        En = T.narrow(E, 1, n)
        out = T.mul_const(_attn(params, "attn_w", En, En, En, m), m.astype(np.float64)[..., None])
        return T.pad_to(out, 1, S)
    rows = mask.astype(np.float64)[..., None]
    return T.mul_const(_attn(params, "attn_w", E, E, E, mask), rows)


def enhance(E, params, mask, return_intermediate=False):
    """(B, S, d) embeddings -> (B, p, d) enhanced embeddings."""
    rows = np.asarray(mask, dtype=np.float64)[..., None]
    x_sa = word_attention(E, params, mask)
    Et = T.transpose(E)
    x = T.transpose(_attn(params, "attn_e", T.transpose(x_sa), Et, Et))
    x = T.mul_const(x, rows)
    # one (p, S) map applied to every embedding column
    x_enh = T.transpose(T.linear(T.transpose(x), params["enc.P"], params["enc.P_b"]))
    if return_intermediate:
        return x_enh, x_sa, x
    return x_enh


def convolve(x_enh, params, cfg):
    """(B, p, d) -> (B, p * l_f) flattened feature."""
    branches = [
        T.relu(T.conv1d(x_enh, params[f"enc.V{i}"], params[f"enc.V{i}_b"], cfg.stride))
        for i in range(1, len(cfg.branch_widths) + 1)
    ]
    h = T.relu(T.conv1d(T.concat(branches, axis=-1), params["enc.Vf"], params["enc.Vf_b"], cfg.stride))
    return T.reshape(h, (h.shape[0], -1) if h.ndim == 3 else (-1,))


def encode(E, params, mask, cfg):
    return convolve(enhance(E, params, mask), params, cfg)


def embed(ids, params):
    return T.embedding(params["enc.emb"], ids)


def forward(ids, lengths, params, cfg):
    """Token ids (B, S) and true lengths (B,) -> h_f (B, feature_len)."""
    ids = np.asarray(ids)
    if ids.ndim != 2 or ids.shape[1] != cfg.seq_len:
        raise ContractError(f"token ids must be (B, {cfg.seq_len}), got {ids.shape}")
    mask = key_mask(lengths, cfg.seq_len)
    if not mask[:, 0].all():
        raise ContractError("every query needs at least one token")
    return encode(embed(ids, params), params, mask, cfg)
