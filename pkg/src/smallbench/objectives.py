"""Masked-language-model and replaced-token-detection objectives."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .data import IGNORE_ID, MaskingPolicy, TokenBatch, dynamic_mask
from .encoder import LN_EPS, ModelConfig, Params, encoder_forward, init_embeddings, init_encoder
from .tensor import Tensor

GENERATOR = "generator."
DISCRIMINATOR = "discriminator."
ENCODER = "encoder."
GENERATOR_HEAD = "generator_head."
DISCRIMINATOR_HEAD = "discriminator_head."
MLM_HEAD = "mlm_head."


def init_mlm_head(hidden: int, config: ModelConfig, rng, prefix: str, dtype=np.float32) -> Params:
    e = config.embedding_dim
    return {
        f"{prefix}dense.weight": Tensor(T.truncated_normal(rng, (hidden, e), 0.02, dtype), requires_grad=True),
        f"{prefix}dense.bias": Tensor(np.zeros(e, dtype), requires_grad=True),
        f"{prefix}ln.gamma": Tensor(np.ones(e, dtype), requires_grad=True),
        f"{prefix}ln.beta": Tensor(np.zeros(e, dtype), requires_grad=True),
        f"{prefix}output_bias": Tensor(np.zeros(config.vocab_size, dtype), requires_grad=True),
    }


def init_rtd_head(hidden: int, rng, prefix: str, dtype=np.float32) -> Params:
    return {
        f"{prefix}dense.weight": Tensor(T.truncated_normal(rng, (hidden, hidden), 0.02, dtype), requires_grad=True),
        f"{prefix}dense.bias": Tensor(np.zeros(hidden, dtype), requires_grad=True),
        f"{prefix}out.weight": Tensor(T.truncated_normal(rng, (hidden, 1), 0.02, dtype), requires_grad=True),
        f"{prefix}out.bias": Tensor(np.zeros(1, dtype), requires_grad=True),
    }


def mlm_logits(hidden: Tensor, params: Params, head: str) -> Tensor:
    """[n, hidden] -> [n, V] through dense -> gelu -> layer norm -> tied token embedding."""
    x = T.gelu(T.linear(hidden, params[head + "dense.weight"], params[head + "dense.bias"]))
    x = T.layer_norm(x, params[head + "ln.gamma"], params[head + "ln.beta"], LN_EPS)
    return x @ params["embeddings.token"].T + params[head + "output_bias"]


def mlm_loss(hidden: Tensor, mlm_labels: np.ndarray, params: Params, head: str = MLM_HEAD) -> Tensor:
    """Cross-entropy of the tied-embedding MLM head at labelled positions only."""
    labels = np.asarray(mlm_labels)
    where = labels != IGNORE_ID
    if not where.any():
        raise ValueError("mlm_loss: no labelled positions")
    logits = mlm_logits(hidden[where], params, head)
    return T.cross_entropy(logits, labels[where], IGNORE_ID)


def generator_sample(
    logits: np.ndarray | Tensor,
    ids: np.ndarray,
    masked: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Replace ids at ``masked`` positions with draws from softmax(logits).

    ``logits`` is either [..., V] aligned with ``ids`` or [n_masked, V] in
    row-major order of the masked positions.  Sampling uses one uniform per
    masked position and the inverse CDF; the result is a plain integer array,
    so nothing downstream can differentiate through it.
    """
    raw = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    masked = np.asarray(masked, dtype=bool)
    if raw.shape[:-1] == masked.shape:
        raw = raw[masked]
    if raw.shape[0] != int(masked.sum()):
        raise ValueError(f"{raw.shape[0]} logit rows for {int(masked.sum())} masked positions")
    z = raw.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(len(cdf))[:, None] * cdf[:, -1:]
    draws = np.minimum((cdf <= u).sum(axis=1), raw.shape[1] - 1)
    out = np.array(ids, copy=True)
    out[masked] = draws
    return out


@dataclass
class RtdLabels:
    labels: np.ndarray  # [B, L] 0 = original, 1 = replaced
    valid_mask: np.ndarray  # [B, L] bool


def rtd_labels(original: np.ndarray, corrupted: np.ndarray, valid_mask: np.ndarray) -> RtdLabels:
    original, corrupted = np.asarray(original), np.asarray(corrupted)
    valid = np.asarray(valid_mask, dtype=bool)
    if original.shape != corrupted.shape or original.shape != valid.shape:
        raise ValueError(f"shape mismatch: {original.shape}, {corrupted.shape}, {valid.shape}")
    return RtdLabels(((original != corrupted) & valid).astype(np.int64), valid)


def rtd_logits(hidden: Tensor, params: Params, head: str = DISCRIMINATOR_HEAD) -> Tensor:
    x = T.gelu(T.linear(hidden, params[head + "dense.weight"], params[head + "dense.bias"]))
    out = T.linear(x, params[head + "out.weight"], params[head + "out.bias"])
    return out.reshape(out.shape[:-1])


def rtd_loss(logits: Tensor, labels: RtdLabels) -> Tensor:
    """Mean binary cross-entropy over every valid position."""
    if not labels.valid_mask.any():
        raise ValueError("rtd_loss: no valid positions")
    return T.bce_with_logits(logits, labels.labels, labels.valid_mask)


class LossOutput(NamedTuple):
    total: Tensor
    mlm: Tensor
    rtd: Tensor | None
    rtd_accuracy: float | None


@dataclass
class ElectraPair:
    """Generator and discriminator stacks reading one set of embedding tables."""

    config: ModelConfig
    params: Params

    @property
    def generator_config(self) -> ModelConfig:
        return self.config.generator_config()

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ElectraPair:
        return cls(config, init_pretraining_params(replace(config, objective="electra"), rng, dtype))


def init_pretraining_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    """All trainable tensors for ``config.objective``; insertion order fixes the init draws."""
    params = init_embeddings(config, rng, dtype)
    if config.objective == "mlm":
        params.update(init_encoder(config, rng, ENCODER, dtype=dtype))
        params.update(init_mlm_head(config.hidden, config, rng, MLM_HEAD, dtype))
        return params
    gen = config.generator_config()
    params.update(init_encoder(gen, rng, GENERATOR, relative_dim=config.hidden, dtype=dtype))
    params.update(init_mlm_head(gen.hidden, config, rng, GENERATOR_HEAD, dtype))
    params.update(init_encoder(config, rng, DISCRIMINATOR, dtype=dtype))
    params.update(init_rtd_head(config.hidden, rng, DISCRIMINATOR_HEAD, dtype))
    return params


def electra_loss(
    pair: ElectraPair,
    batch: TokenBatch,
    policy: MaskingPolicy,
    rng: np.random.Generator,
    lambda_rtd: float | None = None,
    *,
    training: bool = False,
) -> LossOutput:
    """Generator MLM loss plus ``lambda_rtd`` times discriminator RTD loss.

    Random draws, in order: masking, generator dropout, sampling,
    discriminator dropout.
    """
    config = pair.config
    lam = config.lambda_rtd if lambda_rtd is None else lambda_rtd
    masked = batch if batch.mlm_labels is not None else dynamic_mask(batch, policy, rng, config.vocab_size)
    where = masked.mlm_labels != IGNORE_ID

    gen_hidden = encoder_forward(pair.generator_config, pair.params, masked, prefix=GENERATOR, rng=rng, training=training)
    gen_logits = mlm_logits(gen_hidden[where], pair.params, GENERATOR_HEAD)
    mlm = T.cross_entropy(gen_logits, masked.mlm_labels[where], IGNORE_ID)

    corrupted_ids = generator_sample(gen_logits, masked.ids, where, rng)
    original = np.where(where, masked.mlm_labels, masked.ids)
    labels = rtd_labels(original, corrupted_ids, batch.eligible())
    corrupted = replace(batch, ids=corrupted_ids, mlm_labels=None)
    disc_hidden = encoder_forward(config, pair.params, corrupted, prefix=DISCRIMINATOR, rng=rng, training=training)
    logits = rtd_logits(disc_hidden, pair.params)
    rtd = rtd_loss(logits, labels)

    pred = logits.data > 0
    acc = float((pred == labels.labels.astype(bool))[labels.valid_mask].mean())
    return LossOutput(mlm + rtd * lam, mlm, rtd, acc)


def mlm_objective_loss(
    config: ModelConfig,
    params: Params,
    batch: TokenBatch,
    policy: MaskingPolicy,
    rng: np.random.Generator,
    *,
    training: bool = False,
) -> LossOutput:
    masked = batch if batch.mlm_labels is not None else dynamic_mask(batch, policy, rng, config.vocab_size)
    hidden = encoder_forward(config, params, masked, prefix=ENCODER, rng=rng, training=training)
    loss = mlm_loss(hidden, masked.mlm_labels, params, MLM_HEAD)
    return LossOutput(loss, loss, None, None)


def pretraining_loss(config, params, batch, policy, rng, *, training=False) -> LossOutput:
    if config.objective == "electra":
        return electra_loss(ElectraPair(config, params), batch, policy, rng, training=training)
    return mlm_objective_loss(config, params, batch, policy, rng, training=training)


def downstream_prefix(config: ModelConfig) -> str:
    """The stack fine-tuned downstream: the discriminator for ELECTRA, else the sole encoder."""
    return DISCRIMINATOR if config.objective == "electra" else ENCODER
