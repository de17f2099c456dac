"""Transformer encoder with absolute (BERT) or disentangled (DeBERTa) attention.

Parameters live in a flat ``dict[str, Tensor]``.  Embedding tables shared
between networks sit under ``embeddings.``; each encoder stack has its own
prefix (``encoder.``, ``generator.``, ``discriminator.``).  Weight matrices
are stored [in, out].
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Literal

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = dict[str, Tensor]

LN_EPS = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 12
    hidden: int = 256
    heads: int = 4
    ffn_inner: int = 1024
    embedding_dim: int = 128
    vocab_size: int = 30522
    max_len: int = 128
    max_relative_distance: int = 128
    attention_kind: Literal["absolute", "disentangled"] = "disentangled"
    dropout: float = 0.1
    generator_fraction: float = 0.25
    lambda_rtd: float = 50.0
    objective: Literal["mlm", "electra"] = "electra"

    def __post_init__(self):
        for name in ("num_layers", "hidden", "heads", "ffn_inner", "embedding_dim", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.max_relative_distance < 1:
            raise ValueError("max_relative_distance must be >= 1")
        if not 0.0 < self.generator_fraction <= 1.0:
            raise ValueError("generator_fraction must lie in (0, 1]")
        if self.attention_kind not in ("absolute", "disentangled"):
            raise ValueError(f"unknown attention_kind {self.attention_kind!r}")
        if self.objective not in ("mlm", "electra"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def generator_config(self) -> ModelConfig:
        """Same depth, with hidden/ffn/heads scaled by ``generator_fraction``."""
        f = self.generator_fraction
        hidden = max(1, round(self.hidden * f))
        heads = max(1, round(self.heads * f))
        while hidden % heads:
            heads -= 1
        return replace(self, hidden=hidden, heads=heads, ffn_inner=max(1, round(self.ffn_inner * f)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


# -- initialisation --------------------------------------------------------


def _weight(rng, shape, dtype) -> Tensor:
    return Tensor(T.truncated_normal(rng, shape, 0.02, dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_embeddings(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    """Token/segment tables plus absolute positions or the relative table P [2k, hidden]."""
    e = config.embedding_dim
    params = {
        "embeddings.token": _weight(rng, (config.vocab_size, e), dtype),
        "embeddings.segment": _weight(rng, (2, e), dtype),
    }
    if config.attention_kind == "absolute":
        params["embeddings.position"] = _weight(rng, (config.max_len, e), dtype)
    else:
        params["embeddings.relative"] = _weight(rng, (2 * config.max_relative_distance, config.hidden), dtype)
    return params


def init_encoder(
    config: ModelConfig,
    rng: np.random.Generator,
    prefix: str,
    relative_dim: int | None = None,
    dtype=np.float32,
) -> Params:
    """Embedding projection, its layer norm, and ``num_layers`` transformer blocks.

    ``relative_dim`` is the width of the (possibly shared) relative-position
    table; it defaults to ``config.hidden``.
    """
    h, f, e = config.hidden, config.ffn_inner, config.embedding_dim
    rel = relative_dim or h
    p: Params = {
        f"{prefix}embed_proj.weight": _weight(rng, (e, h), dtype),
        f"{prefix}embed_proj.bias": _zeros((h,), dtype),
        f"{prefix}embed_ln.gamma": _ones((h,), dtype),
        f"{prefix}embed_ln.beta": _zeros((h,), dtype),
    }
    for i in range(config.num_layers):
        lp = f"{prefix}layer.{i}."
        for name in ("q", "k", "v", "o"):
            p[f"{lp}attn.{name}.weight"] = _weight(rng, (h, h), dtype)
            p[f"{lp}attn.{name}.bias"] = _zeros((h,), dtype)
        if config.attention_kind == "disentangled":
            for name in ("pos_q", "pos_k"):
                p[f"{lp}attn.{name}.weight"] = _weight(rng, (rel, h), dtype)
                p[f"{lp}attn.{name}.bias"] = _zeros((h,), dtype)
        p[f"{lp}attn_ln.gamma"] = _ones((h,), dtype)
        p[f"{lp}attn_ln.beta"] = _zeros((h,), dtype)
        p[f"{lp}ffn.in.weight"] = _weight(rng, (h, f), dtype)
        p[f"{lp}ffn.in.bias"] = _zeros((f,), dtype)
        p[f"{lp}ffn.out.weight"] = _weight(rng, (f, h), dtype)
        p[f"{lp}ffn.out.bias"] = _zeros((h,), dtype)
        p[f"{lp}ffn_ln.gamma"] = _ones((h,), dtype)
        p[f"{lp}ffn_ln.beta"] = _zeros((h,), dtype)
    return p


def layer_params(params: Params, prefix: str, index: int) -> dict[str, Tensor]:
    """Short-named view (``q.weight``, ``pos_k.bias`` ...) of one block's attention weights."""
    lp = f"{prefix}layer.{index}.attn."
    return {k[len(lp):]: v for k, v in params.items() if k.startswith(lp)}


def count_parameters(config: ModelConfig) -> int:
    """Trainable scalars of one embedding set plus one encoder stack, in closed form."""
    V, e, h, f, L = config.vocab_size, config.embedding_dim, config.hidden, config.ffn_inner, config.num_layers
    embeddings = V * e + 2 * e
    if config.attention_kind == "absolute":
        embeddings += config.max_len * e
    else:
        embeddings += 2 * config.max_relative_distance * h
    projection = e * h + h + 2 * h
    attention = 4 * (h * h + h)
    if config.attention_kind == "disentangled":
        attention += 2 * (h * h + h)
    ffn = h * f + f + f * h + h
    block = attention + ffn + 4 * h
    return embeddings + projection + L * block


# -- attention -------------------------------------------------------------


def relative_distance(i, j, k: int):
    """Bucket of the offset ``i - j`` clamped to [-k, k): 0 if i-j <= -k, 2k-1 if i-j >= k, else i-j+k."""
    d = np.asarray(i) - np.asarray(j)
    out = np.where(d <= -k, 0, np.where(d >= k, 2 * k - 1, d + k))
    return int(out) if out.ndim == 0 else out


_REL_CACHE: dict[tuple[int, int], np.ndarray] = {}


def relative_index(length: int, k: int) -> np.ndarray:
    """``[L, L]`` table with entry (i, j) = relative_distance(i, j, k)."""
    key = (length, k)
    if key not in _REL_CACHE:
        pos = np.arange(length)
        _REL_CACHE[key] = relative_distance(pos[:, None], pos[None, :], k)
    return _REL_CACHE[key]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, H = x.shape
    return x.reshape(B, L, heads, H // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, nh, L, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, nh * d)


def _attend(scores: Tensor, v: Tensor, pad_mask, lw, dropout_p, rng, training, return_probs):
    if pad_mask is not None:
        scores = T.masked_fill(scores, ~np.asarray(pad_mask, dtype=bool)[:, None, None, :], -np.inf)
    probs = T.softmax(scores, axis=-1)
    ctx = _merge_heads(T.dropout(probs, dropout_p, rng, training) @ v)
    out = T.linear(ctx, lw["o.weight"], lw["o.bias"])
    return (out, probs) if return_probs else out


def absolute_attention(
    h: Tensor,
    lw: dict[str, Tensor],
    pad_mask: np.ndarray | None,
    heads: int,
    *,
    dropout_p: float = 0.0,
    rng=None,
    training: bool = False,
    return_probs: bool = False,
):
    """Multi-head scaled dot-product attention, scale 1/sqrt(d_head), pad columns masked."""
    if h.ndim != 3 or h.shape[-1] != lw["q.weight"].shape[0]:
        raise ValueError(f"hidden states {h.shape} do not match projection {lw['q.weight'].shape}")
    q = _split_heads(T.linear(h, lw["q.weight"], lw["q.bias"]), heads)
    k = _split_heads(T.linear(h, lw["k.weight"], lw["k.bias"]), heads)
    v = _split_heads(T.linear(h, lw["v.weight"], lw["v.bias"]), heads)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    return _attend(scores, v, pad_mask, lw, dropout_p, rng, training, return_probs)


def disentangled_attention(
    h: Tensor,
    rel_table: Tensor,
    lw: dict[str, Tensor],
    pad_mask: np.ndarray | None,
    heads: int,
    k: int,
    *,
    dropout_p: float = 0.0,
    rng=None,
    training: bool = False,
    return_probs: bool = False,
):
    """Content-to-content + content-to-position + position-to-content attention.

    For each head, score(i, j) = Qc[i].Kc[j] + Qc[i].Kr[d(i, j)] + Kc[j].Qr[d(j, i)]
    with d the clamped relative bucket, all divided by sqrt(3 * d_head).
    Qr and Kr are the relative table projected by this layer's position
    query/key weights.
    """
    if h.ndim != 3 or h.shape[-1] != lw["q.weight"].shape[0]:
        raise ValueError(f"hidden states {h.shape} do not match projection {lw['q.weight'].shape}")
    if rel_table.shape[0] != 2 * k or rel_table.shape[1] != lw["pos_q.weight"].shape[0]:
        raise ValueError(f"relative table {rel_table.shape} does not match k={k} / {lw['pos_q.weight'].shape}")
    L = h.shape[1]
    d = h.shape[-1] // heads
    qc = _split_heads(T.linear(h, lw["q.weight"], lw["q.bias"]), heads)
    kc = _split_heads(T.linear(h, lw["k.weight"], lw["k.bias"]), heads)
    v = _split_heads(T.linear(h, lw["v.weight"], lw["v.bias"]), heads)
    # [2k, hidden] -> [heads, 2k, d]
    qr = T.linear(rel_table, lw["pos_q.weight"], lw["pos_q.bias"]).reshape(2 * k, heads, d).transpose(1, 0, 2)
    kr = T.linear(rel_table, lw["pos_k.weight"], lw["pos_k.bias"]).reshape(2 * k, heads, d).transpose(1, 0, 2)

    rel = relative_index(L, k)
    c2c = qc @ kc.swapaxes(-1, -2)
    c2p = T.gather_last(qc @ kr.swapaxes(-1, -2), rel)
    p2c = T.gather_last(kc @ qr.swapaxes(-1, -2), rel).swapaxes(-1, -2)
    scores = (c2c + c2p + p2c) * (1.0 / math.sqrt(3 * d))
    return _attend(scores, v, pad_mask, lw, dropout_p, rng, training, return_probs)


# -- forward ---------------------------------------------------------------


def embed(
    config: ModelConfig,
    params: Params,
    prefix: str,
    ids: np.ndarray,
    segment_ids: np.ndarray,
    *,
    rng=None,
    training: bool = False,
) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise IndexError(f"token id out of range [0, {config.vocab_size})")
    x = T.embedding(params["embeddings.token"], ids) + T.embedding(params["embeddings.segment"], segment_ids)
    if config.attention_kind == "absolute":
        L = ids.shape[1]
        if L > config.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {config.max_len}")
        x = x + params["embeddings.position"][:L]
    x = T.linear(x, params[f"{prefix}embed_proj.weight"], params[f"{prefix}embed_proj.bias"])
    x = T.layer_norm(x, params[f"{prefix}embed_ln.gamma"], params[f"{prefix}embed_ln.beta"], LN_EPS)
    return T.dropout(x, config.dropout, rng, training)


def encoder_forward(
    config: ModelConfig,
    params: Params,
    batch,
    *,
    prefix: str = "encoder.",
    rng=None,
    training: bool = False,
) -> Tensor:
    """Run the stack on ``batch`` (anything with ids/segment_ids/pad_mask); returns [B, L, hidden].

    ``config`` must describe this stack (use ``generator_config()`` for a
    generator).  Dropout is active only when ``training`` and an ``rng`` are
    given.
    """
    p = config.dropout if training else 0.0
    x = embed(config, params, prefix, batch.ids, batch.segment_ids, rng=rng, training=training)
    for i in range(config.num_layers):
        lp = f"{prefix}layer.{i}."
        lw = layer_params(params, prefix, i)
        if config.attention_kind == "disentangled":
            a = disentangled_attention(
                x, params["embeddings.relative"], lw, batch.pad_mask, config.heads,
                config.max_relative_distance, dropout_p=p, rng=rng, training=training,
            )
        else:
            a = absolute_attention(x, lw, batch.pad_mask, config.heads, dropout_p=p, rng=rng, training=training)
        x = T.layer_norm(x + T.dropout(a, p, rng, training), params[lp + "attn_ln.gamma"], params[lp + "attn_ln.beta"], LN_EPS)
        f = T.gelu(T.linear(x, params[lp + "ffn.in.weight"], params[lp + "ffn.in.bias"]))
        f = T.linear(f, params[lp + "ffn.out.weight"], params[lp + "ffn.out.bias"])
        x = T.layer_norm(x + T.dropout(f, p, rng, training), params[lp + "ffn_ln.gamma"], params[lp + "ffn_ln.beta"], LN_EPS)
    return x
