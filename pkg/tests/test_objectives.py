import math
from dataclasses import replace

import numpy as np
import pytest

from smallbench import tensor as T
from smallbench.data import IGNORE_ID, MaskingPolicy, TokenBatch, collate, dynamic_mask
from smallbench.encoder import ModelConfig, encoder_forward
from smallbench.objectives import (
    DISCRIMINATOR,
    DISCRIMINATOR_HEAD,
    ENCODER,
    GENERATOR,
    GENERATOR_HEAD,
    MLM_HEAD,
    ElectraPair,
    RtdLabels,
    electra_loss,
    generator_sample,
    init_pretraining_params,
    mlm_logits,
    mlm_loss,
    rtd_labels,
    rtd_loss,
)
from smallbench.optim import OptimState, adamw_step, collect_grads, zero_grads
from smallbench.tensor import Tensor

from conftest import tiny_config, toy_config

def _batch(rng, B, L, V):
    ids = rng.integers(5, V, size=(B, L))
    ids[:, 0], ids[:, -1] = 2, 3
    return TokenBatch(ids, np.zeros_like(ids), np.ones_like(ids, dtype=bool))


def _bce(logit, label):
    return math.log1p(math.exp(-logit)) if label else math.log1p(math.exp(logit))


class TestMlmLoss:
    def test_untrained_loss_near_uniform(self, rng):
        config = toy_config(vocab_size=100, objective="mlm", dropout=0.0)
        params = init_pretraining_params(config, T.new_rng(0))
        batch = dynamic_mask(_batch(rng, 8, 32, 100), MaskingPolicy(), rng, 100)
        hidden = encoder_forward(config, params, batch, prefix=ENCODER)
        loss = float(mlm_loss(hidden, batch.mlm_labels, params).data)
        assert 0.5 * math.log(100) <= loss <= 1.5 * math.log(100)

    def test_ignores_unlabelled_ids(self, rng):
        config = tiny_config(objective="mlm")
        params = init_pretraining_params(config, T.new_rng(0), np.float64)
        hidden = Tensor(rng.normal(size=(2, 6, config.hidden)))
        labels = np.full((2, 6), IGNORE_ID)
        labels[0, 2], labels[1, 4] = 7, 9
        a = float(mlm_loss(hidden, labels, params).data)
        other = hidden.data.copy()
        other[labels == IGNORE_ID] = rng.normal(size=other[labels == IGNORE_ID].shape)
        assert float(mlm_loss(Tensor(other), labels, params).data) == a

    def test_no_labels(self, rng):
        config = tiny_config(objective="mlm")
        params = init_pretraining_params(config, T.new_rng(0))
        with pytest.raises(ValueError):
            mlm_loss(Tensor(rng.normal(size=(1, 4, config.hidden))), np.full((1, 4), IGNORE_ID), params)

    def test_single_batch_overfit(self, toy_vocab, toy_sequences):
        config = toy_config(vocab_size=len(toy_vocab), objective="mlm", dropout=0.0)
        params = init_pretraining_params(config, T.new_rng(0))
        rng = T.new_rng(1)
        batch = dynamic_mask(collate(toy_sequences[:8]), MaskingPolicy(), rng, config.vocab_size)
        state = OptimState(weight_decay=0.0)
        for _ in range(200):
            zero_grads(params)
            hidden = encoder_forward(config, params, batch, prefix=ENCODER)
            loss = mlm_loss(hidden, batch.mlm_labels, params)
            loss.backward()
            adamw_step(params, collect_grads(params), state, 1e-3)
        assert float(loss.data) < 0.1 * math.log(config.vocab_size)


class TestGeneratorSample:
    def test_degenerate_logits(self, rng):
        logits = np.zeros((3, 10))
        logits[:, 6] = 1e4
        ids = np.array([[2, 5, 5, 5, 3]])
        masked = np.array([[False, True, False, True, True]])
        out = generator_sample(logits, ids, masked, rng)
        assert out.tolist() == [[2, 6, 5, 6, 6]]

    def test_unmasked_untouched(self, rng):
        ids = rng.integers(0, 9, size=(4, 7))
        masked = rng.random((4, 7)) < 0.3
        out = generator_sample(rng.normal(size=(4, 7, 9)), ids, masked, rng)
        np.testing.assert_array_equal(out[~masked], ids[~masked])

    def test_deterministic(self):
        logits = np.random.default_rng(0).normal(size=(50, 12))
        ids = np.zeros((5, 10), np.int64)
        masked = np.ones((5, 10), bool)
        a = generator_sample(logits, ids, masked, T.new_rng(3))
        b = generator_sample(logits, ids, masked, T.new_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_uniform_frequencies(self):
        n = 40_000
        out = generator_sample(np.zeros((n, 4)), np.zeros(n, np.int64), np.ones(n, bool), T.new_rng(11))
        freq = np.bincount(out, minlength=4) / n
        assert np.all(np.abs(freq - 0.25) <= 0.01)

    def test_matches_softmax_probabilities(self):
        n = 60_000
        logits = np.log(np.array([0.1, 0.2, 0.3, 0.4]))
        out = generator_sample(np.tile(logits, (n, 1)), np.zeros(n, np.int64), np.ones(n, bool), T.new_rng(5))
        np.testing.assert_allclose(np.bincount(out, minlength=4) / n, [0.1, 0.2, 0.3, 0.4], atol=0.01)

    def test_row_count_mismatch(self, rng):
        with pytest.raises(ValueError):
            generator_sample(np.zeros((2, 4)), np.zeros(5, np.int64), np.ones(5, bool), rng)


class TestRtdLabels:
    def test_identical(self):
        ids = np.array([[5, 6, 7]])
        assert rtd_labels(ids, ids, np.ones_like(ids, bool)).labels.tolist() == [[0, 0, 0]]

    def test_definition(self):
        out = rtd_labels(np.array([5, 6, 7]), np.array([5, 9, 7]), np.ones(3, bool))
        assert out.labels.tolist() == [0, 1, 0]

    def test_resampled_to_original_is_original(self, rng):
        ids = np.array([[2, 8, 9, 3]])
        masked = np.array([[False, True, True, False]])
        logits = np.zeros((2, 12))
        logits[0, 8] = 1e4  # first masked slot draws its own original id
        logits[1, 4] = 1e4
        corrupted = generator_sample(logits, ids, masked, rng)
        assert rtd_labels(ids, corrupted, np.ones_like(masked)).labels.tolist() == [[0, 0, 1, 0]]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            rtd_labels(np.zeros(3), np.zeros(4), np.ones(3, bool))


class TestRtdLoss:
    def test_zero_logits(self):
        labels = RtdLabels(np.array([[0, 1, 1]]), np.ones((1, 3), bool))
        assert float(rtd_loss(Tensor(np.zeros((1, 3)), dtype=np.float64), labels).data) == pytest.approx(math.log(2))

    def test_confident_limit(self):
        labels = RtdLabels(np.array([[0, 1, 0]]), np.ones((1, 3), bool))
        assert float(rtd_loss(Tensor(np.array([[-40.0, 40.0, -40.0]])), labels).data) < 1e-12

    def test_hand_case(self):
        labels = RtdLabels(np.array([0, 1]), np.ones(2, bool))
        got = float(rtd_loss(Tensor(np.array([0.0, 2.0])), labels).data)
        assert got == pytest.approx((_bce(0.0, 0) + _bce(2.0, 1)) / 2, abs=1e-9)
        assert got == pytest.approx(0.410038, abs=1e-6)

    def test_mean_over_valid_only(self, rng):
        logits = rng.normal(size=(3, 5))
        labels = rng.integers(0, 2, size=(3, 5))
        valid = rng.random((3, 5)) < 0.6
        valid[0, 0] = True
        got = float(rtd_loss(Tensor(logits), RtdLabels(labels, valid)).data)
        ref = np.mean([_bce(x, y) for x, y, v in zip(logits.ravel(), labels.ravel(), valid.ravel()) if v])
        assert got == pytest.approx(ref, abs=1e-6)

    def test_no_valid(self):
        with pytest.raises(ValueError):
            rtd_loss(Tensor(np.zeros(3)), RtdLabels(np.zeros(3, np.int64), np.zeros(3, bool)))


def _pair(kind="disentangled", seed=0):
    # generator width 4: layer norm over only 2 features would saturate to +-1
    config = tiny_config(attention_kind=kind, objective="electra", hidden=16, heads=4, ffn_inner=24)
    return ElectraPair(config, init_pretraining_params(config, T.new_rng(seed), np.float64))


def _losses(pair, batch, seed, lam=None):
    return electra_loss(pair, batch, MaskingPolicy(mask_prob=0.3), T.new_rng(seed), lam)


class TestElectraLoss:
    @pytest.mark.parametrize("kind", ["absolute", "disentangled"])
    def test_total_is_reassembled(self, kind, rng):
        pair = _pair(kind)
        out = _losses(pair, _batch(rng, 3, 8, 23), 0)
        lam = pair.config.lambda_rtd
        assert float(out.total.data) == float(out.mlm.data) + lam * float(out.rtd.data)
        assert 0.0 <= out.rtd_accuracy <= 1.0

    def test_lambda_zero(self, rng):
        out = _losses(_pair(), _batch(rng, 3, 8, 23), 0, lam=0.0)
        assert float(out.total.data) == float(out.mlm.data)

    def test_preset_labels_respected(self, rng):
        pair = _pair()
        batch = _batch(rng, 2, 8, 23)
        masked = dynamic_mask(batch, MaskingPolicy(mask_prob=0.5), rng, 23)
        out = _losses(pair, masked, 0)
        hidden = encoder_forward(pair.generator_config, pair.params, masked, prefix=GENERATOR)
        ref = mlm_loss(hidden, masked.mlm_labels, pair.params, GENERATOR_HEAD)
        assert float(out.mlm.data) == pytest.approx(float(ref.data), abs=1e-12)

    def test_generator_is_narrower(self):
        pair = _pair()
        g = pair.generator_config
        assert g.hidden == round(pair.config.hidden * pair.config.generator_fraction)
        assert g.num_layers == pair.config.num_layers
        q = pair.params[f"{GENERATOR}layer.0.attn.q.weight"]
        assert q.shape == (g.hidden, g.hidden)

    def test_one_embedding_table(self):
        pair = _pair()
        assert not any(name.startswith((GENERATOR + "embed", DISCRIMINATOR + "embed")) for name in pair.params
                       if "embed_" not in name)
        assert sum(name.endswith("token") for name in pair.params) == 1


class TestGradientFlow:
    def _backward(self, pair, batch, term):
        zero_grads(pair.params)
        out = _losses(pair, batch, 0)
        getattr(out, term).backward()
        return {n: p.grad for n, p in pair.params.items()}

    def test_rtd_never_reaches_generator_weights(self, rng):
        pair = _pair()
        grads = self._backward(pair, _batch(rng, 3, 8, 23), "rtd")
        for name, g in grads.items():
            if name.startswith((GENERATOR, GENERATOR_HEAD)):
                assert g is None or not np.any(g), name
        assert np.any(grads["embeddings.token"])

    def test_shared_embeddings_receive_both_terms(self, rng):
        pair = _pair()
        batch = _batch(rng, 3, 8, 23)
        g_mlm = self._backward(pair, batch, "mlm")["embeddings.token"].copy()
        g_rtd = self._backward(pair, batch, "rtd")["embeddings.token"].copy()
        g_all = self._backward(pair, batch, "total")["embeddings.token"]
        assert np.any(g_mlm) and np.any(g_rtd)
        np.testing.assert_allclose(g_all, g_mlm + pair.config.lambda_rtd * g_rtd, rtol=1e-9, atol=1e-12)

    def test_mlm_term_has_no_discriminator_gradient(self, rng):
        pair = _pair()
        grads = self._backward(pair, _batch(rng, 3, 8, 23), "mlm")
        for name, g in grads.items():
            if name.startswith((DISCRIMINATOR, DISCRIMINATOR_HEAD)):
                assert g is None or not np.any(g), name

    @pytest.mark.parametrize("name", [f"{GENERATOR}layer.0.attn.q.weight", f"{GENERATOR}layer.1.ffn.in.weight",
                                      f"{GENERATOR_HEAD}dense.weight"])
    def test_finite_difference_generator_weight_leaves_rtd(self, name, rng):
        pair = _pair()
        batch = _batch(rng, 3, 8, 23)
        base = _losses(pair, batch, 0)
        p = pair.params[name]
        # small enough that no inverse-CDF draw crosses a bucket edge
        p.data += 1e-4 * np.random.default_rng(0).normal(size=p.shape)
        bumped = _losses(pair, batch, 0)
        assert float(bumped.rtd.data) == float(base.rtd.data)
        assert float(bumped.mlm.data) != float(base.mlm.data)

    @pytest.mark.parametrize("name", [f"{DISCRIMINATOR}layer.0.attn.q.weight", f"{DISCRIMINATOR_HEAD}out.weight"])
    def test_finite_difference_discriminator_weight_leaves_mlm(self, name, rng):
        pair = _pair()
        batch = _batch(rng, 3, 8, 23)
        base = _losses(pair, batch, 0)
        p = pair.params[name]
        p.data += 1e-3 * np.random.default_rng(0).normal(size=p.shape)
        bumped = _losses(pair, batch, 0)
        assert float(bumped.mlm.data) == float(base.mlm.data)
        assert float(bumped.rtd.data) != float(base.rtd.data)

    def test_labels_only_at_masked_positions(self, rng):
        pair = _pair()
        batch = _batch(rng, 4, 8, 23)
        masked = dynamic_mask(batch, MaskingPolicy(mask_prob=0.5), rng, 23)
        hidden = encoder_forward(pair.generator_config, pair.params, masked, prefix=GENERATOR)
        where = masked.mlm_labels != IGNORE_ID
        corrupted = generator_sample(mlm_logits(hidden[where], pair.params, GENERATOR_HEAD), masked.ids, where, rng)
        labels = rtd_labels(batch.ids, corrupted, batch.eligible())
        assert not np.any(labels.labels[~where])


def test_mlm_mode_has_single_stack():
    params = init_pretraining_params(replace(tiny_config(), objective="mlm"), T.new_rng(0))
    assert any(n.startswith(ENCODER) for n in params) and any(n.startswith(MLM_HEAD) for n in params)
    assert not any(n.startswith((GENERATOR, DISCRIMINATOR)) for n in params)


def test_electra_requires_valid_config():
    with pytest.raises(ValueError):
        ModelConfig(generator_fraction=0.0)
