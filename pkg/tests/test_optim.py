import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smallbench import tensor as T
from smallbench.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from smallbench.objectives import init_pretraining_params
from smallbench.optim import (
    OptimState,
    Schedule,
    adamw_step,
    clip_grad_norm,
    decay_exempt,
    global_norm,
    layerwise_lrs,
    lr_at_step,
    parameter_group,
)
from smallbench.tensor import Tensor
from smallbench.train import Pretrainer, TrainingDiverged, TrainOptions, pretrain

from conftest import toy_config


def _param(value):
    return {"w": Tensor(np.array(value, dtype=np.float64), requires_grad=True)}


class TestSchedule:
    def test_pretraining_points(self):
        s = Schedule(5e-4, 1_000_000, warmup_steps=10_000)
        assert lr_at_step(0, s) == 0.0
        assert lr_at_step(10_000, s) == pytest.approx(5e-4, rel=1e-12)
        assert lr_at_step(5_000, s) == pytest.approx(2.5e-4, rel=1e-12)
        assert lr_at_step(1_000_000, s) == 0.0

    def test_fraction_warmup(self):
        s = Schedule(1e-4, 1000, warmup_fraction=0.1)
        assert s.warmup == 100
        assert lr_at_step(100, s) == pytest.approx(1e-4)
        assert lr_at_step(550, s) == pytest.approx(0.5e-4)

    def test_errors(self):
        s = Schedule(1e-3, 10, warmup_steps=2)
        with pytest.raises(ValueError):
            lr_at_step(11, s)
        with pytest.raises(ValueError):
            Schedule(1e-3, 10, warmup_steps=10)
        with pytest.raises(ValueError):
            Schedule(0.0, 10, warmup_steps=1)
        with pytest.raises(ValueError):
            Schedule(1e-3, 10)

    @settings(max_examples=100)
    @given(st.integers(2, 500), st.data())
    def test_piecewise_linear_peak_at_warmup(self, total, data):
        warmup = data.draw(st.integers(0, total - 1))
        s = Schedule(3e-4, total, warmup_steps=warmup)
        lrs = np.array([lr_at_step(t, s) for t in range(total + 1)])
        assert lrs.max() == pytest.approx(3e-4) and int(lrs.argmax()) == warmup
        second = np.diff(lrs, 2)
        kinks = np.flatnonzero(np.abs(second) > 1e-15)
        assert set((kinks + 1).tolist()) <= {warmup}
        assert np.all(lrs >= 0)


class TestLayerwise:
    def test_no_decay(self):
        assert set(layerwise_lrs(2e-5, 1.0, 12).values()) == {2e-5}

    def test_two_layers(self):
        rates = layerwise_lrs(1e-4, 0.8, 12)
        assert rates["head"] == rates["layer.12"] == 1e-4
        assert rates["layer.11"] == pytest.approx(8e-5)

    def test_embeddings(self):
        assert layerwise_lrs(1e-4, 0.8, 12)["embeddings"] == pytest.approx(6.87e-6, abs=1e-8)

    def test_group_order(self):
        assert list(layerwise_lrs(1.0, 0.5, 3)) == ["head", "layer.3", "layer.2", "layer.1", "embeddings"]

    def test_bad_decay(self):
        with pytest.raises(ValueError):
            layerwise_lrs(1e-4, 0.0, 3)

    def test_parameter_groups(self):
        assert parameter_group("discriminator.layer.0.attn.q.weight") == "layer.1"
        assert parameter_group("encoder.layer.11.ffn_ln.gamma") == "layer.12"
        assert parameter_group("head.out.weight") == "head"
        assert parameter_group("embeddings.token") == "embeddings"
        assert parameter_group("discriminator.relative") == "embeddings"

    def test_decay_exempt(self):
        assert decay_exempt("encoder.layer.0.attn.q.bias")
        assert decay_exempt("embeddings.ln.gamma") and decay_exempt("embeddings.ln.beta")
        assert not decay_exempt("encoder.layer.0.attn.q.weight")


def reference_adamw(p, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-6):
    """Plain-float transcription of bias-corrected AdamW."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * ((m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps) + wd * p)
    return p


class TestAdamW:
    def test_zero_grad_no_decay(self):
        params, state = _param([1.0, -2.0]), OptimState(weight_decay=0.0)
        adamw_step(params, {"w": np.zeros(2)}, state, 0.1)
        assert params["w"].data.tolist() == [1.0, -2.0] and state.step == 1

    def test_pure_decay(self):
        params = _param(1.0)
        adamw_step(params, {"w": np.zeros(())}, OptimState(weight_decay=0.01), 0.1)
        assert float(params["w"].data) == pytest.approx(0.999, abs=1e-12)

    def test_hand_stepped_scalar(self):
        params, state = _param(1.0), OptimState(weight_decay=0.0)
        adamw_step(params, {"w": np.array(0.5)}, state, 1e-3)
        assert float(state.m["w"]) == pytest.approx(0.05)
        assert float(state.v["w"]) == pytest.approx(2.5e-4)
        assert float(params["w"].data) == pytest.approx(1.0 - 1e-3 * 0.5 / (0.5 + 1e-6), abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_reference(self, seed):
        rng = np.random.default_rng(seed)
        grads = rng.normal(size=20).tolist()
        params, state = _param(0.7), OptimState(weight_decay=0.01)
        for g in grads:
            adamw_step(params, {"w": np.array(g)}, state, 3e-3)
        assert float(params["w"].data) == pytest.approx(reference_adamw(0.7, grads, 3e-3, 0.01), abs=1e-12)

    def test_bias_and_norm_not_decayed(self):
        params = {"x.bias": Tensor(np.ones(2)), "x.weight": Tensor(np.ones(2))}
        adamw_step(params, {k: np.zeros(2) for k in params}, OptimState(weight_decay=0.5), 0.1)
        assert params["x.bias"].data.tolist() == [1.0, 1.0]
        assert params["x.weight"].data.tolist() == [0.95, 0.95]

    @settings(max_examples=50)
    @given(st.floats(10.0, 1e6), st.sampled_from([-1.0, 1.0]))
    def test_update_magnitude_tends_to_lr(self, g, sign):
        params = _param(0.0)
        adamw_step(params, {"w": np.array(sign * g)}, OptimState(weight_decay=0.0), 1e-3)
        assert abs(float(params["w"].data)) == pytest.approx(1e-3, rel=1e-6)

    def test_nan_gradient_aborts_before_update(self):
        params = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}
        state = OptimState()
        with pytest.raises(FloatingPointError, match="b"):
            adamw_step(params, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, state, 0.1)
        assert params["a"].data.tolist() == [1.0, 1.0] and state.step == 0 and not state.m

    def test_per_parameter_rates(self):
        params = {"a": Tensor(np.zeros(1)), "b": Tensor(np.zeros(1))}
        adamw_step(params, {"a": np.ones(1), "b": np.ones(1)}, OptimState(weight_decay=0.0), {"a": 1e-3, "b": 1e-4})
        assert params["a"].data[0] == pytest.approx(-1e-3, rel=1e-5)
        assert params["b"].data[0] == pytest.approx(-1e-4, rel=1e-5)


class TestClipping:
    def test_norm(self):
        assert global_norm({"a": np.array([3.0]), "b": np.array([4.0])}) == 5.0

    def test_clip_to_one(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grad_norm(grads, 1.0) == 5.0
        np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8])

    @settings(max_examples=100)
    @given(st.integers(0, 2**31), st.floats(0.01, 10.0))
    def test_never_increases_and_keeps_direction(self, seed, max_norm):
        rng = np.random.default_rng(seed)
        grads = {k: rng.normal(size=int(rng.integers(1, 6))) * rng.uniform(0, 5) for k in "abc"}
        before = {k: v.copy() for k, v in grads.items()}
        norm = clip_grad_norm(grads, max_norm)
        after = global_norm(grads)
        assert after <= norm + 1e-12 and after <= max_norm * (1 + 1e-9)
        flat_b = np.concatenate(list(before.values()))
        flat_a = np.concatenate(list(grads.values()))
        if norm > 0:
            assert np.dot(flat_a, flat_b) == pytest.approx(np.linalg.norm(flat_a) * norm, rel=1e-9)


def _small_config(**kw):
    return toy_config(vocab_size=kw.pop("vocab_size"), num_layers=1, hidden=32, heads=2, ffn_inner=64,
                      embedding_dim=32, **kw)


def _trainer(vocab, seqs, steps=20, seed=0, **kw):
    config = _small_config(vocab_size=len(vocab), **kw)
    return Pretrainer(config, seqs, Schedule(1e-3, steps, warmup_steps=2), seed,
                      TrainOptions(batch_size=8, log_every=0), {"vocab": vocab.tokens})


class TestCheckpoint:
    def _ckpt(self, toy_vocab, toy_sequences):
        t = _trainer(toy_vocab, toy_sequences)
        t.run(3)
        return t.checkpoint()

    def test_round_trip_byte_identical(self, toy_vocab, toy_sequences, tmp_path):
        ckpt = self._ckpt(toy_vocab, toy_sequences)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(ckpt, a)
        loaded = load_checkpoint(a)
        save_checkpoint(loaded, b)
        assert a.read_bytes() == b.read_bytes()
        assert loaded.step == ckpt.step == 3
        assert loaded.config == ckpt.config and loaded.meta == ckpt.meta
        for name, arr in ckpt.tensors.items():
            assert loaded.tensors[name].tobytes() == arr.tobytes()
        for name, arr in ckpt.optim.m.items():
            assert loaded.optim.m[name].tobytes() == arr.tobytes()
        assert loaded.optim.step == ckpt.optim.step and loaded.rng_state == ckpt.rng_state

    def test_layout(self, toy_vocab, toy_sequences):
        data = to_bytes(self._ckpt(toy_vocab, toy_sequences))
        assert data[:4] == MAGIC and int.from_bytes(data[4:8], "little") == 1

    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="magic"):
            from_bytes(b"NOPE" + bytes(40))

    def test_bad_version(self, toy_vocab, toy_sequences):
        data = bytearray(to_bytes(self._ckpt(toy_vocab, toy_sequences)))
        data[4:8] = (7).to_bytes(4, "little")
        with pytest.raises(CheckpointError, match="version"):
            from_bytes(bytes(data))

    def test_truncated(self, toy_vocab, toy_sequences):
        data = to_bytes(self._ckpt(toy_vocab, toy_sequences))
        with pytest.raises(CheckpointError):
            from_bytes(data[: len(data) // 2])

    def test_flipped_byte(self, toy_vocab, toy_sequences):
        data = bytearray(to_bytes(self._ckpt(toy_vocab, toy_sequences)))
        data[len(data) // 2] ^= 0xFF
        with pytest.raises(CheckpointError, match="checksum"):
            from_bytes(bytes(data))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nothing.ckpt"):
            load_checkpoint(tmp_path / "nothing.ckpt")

    def test_without_optimizer(self):
        config = toy_config(vocab_size=50, num_layers=1)
        tensors = {k: v.data for k, v in init_pretraining_params(config, T.new_rng(0)).items()}
        ckpt = from_bytes(to_bytes(Checkpoint(config, tensors, 0)))
        assert ckpt.optim is None and ckpt.rng_state is None


class TestPretrainLoop:
    def test_zero_steps_equals_init(self, toy_vocab, toy_sequences):
        t = _trainer(toy_vocab, toy_sequences)
        init = init_pretraining_params(t.config, T.new_rng([0, 0x1A17]))
        ckpt, records = pretrain(t.config, toy_sequences, t.schedule, 0, steps=0,
                                 options=TrainOptions(batch_size=8, log_every=0))
        assert records == [] and ckpt.step == 0
        for name, p in init.items():
            np.testing.assert_array_equal(ckpt.tensors[name], p.data)

    @pytest.mark.parametrize("objective", ["electra", "mlm"])
    def test_deterministic(self, toy_vocab, toy_sequences, objective):
        a = _trainer(toy_vocab, toy_sequences, objective=objective).run(5)
        b = _trainer(toy_vocab, toy_sequences, objective=objective).run(5)
        assert a == b
        c = _trainer(toy_vocab, toy_sequences, seed=1, objective=objective).run(5)
        assert a != c

    @pytest.mark.parametrize("objective", ["electra", "mlm"])
    def test_resume_is_bit_exact(self, toy_vocab, toy_sequences, tmp_path, objective):
        straight = _trainer(toy_vocab, toy_sequences, objective=objective)
        straight.run(20)
        first = _trainer(toy_vocab, toy_sequences, objective=objective)
        first.run(10, tmp_path / "half.ckpt")
        resumed = Pretrainer.from_checkpoint(load_checkpoint(tmp_path / "half.ckpt"), toy_sequences,
                                             first.schedule, first.options)
        resumed.run(10)
        for name, p in straight.params.items():
            assert p.data.tobytes() == resumed.params[name].data.tobytes(), name
        assert straight.history[10:] == resumed.history

    def test_records(self, toy_vocab, toy_sequences):
        record = _trainer(toy_vocab, toy_sequences).train_step()
        assert set(record) == {"step", "lr", "grad_norm", "total", "mlm", "rtd", "rtd_accuracy"}
        assert record["step"] == 1 and record["lr"] == pytest.approx(5e-4)

    def test_grad_accum(self, toy_vocab, toy_sequences):
        t = _trainer(toy_vocab, toy_sequences)
        t.options.grad_accum = 2
        t.train_step()
        assert t.batches.position()[1] == 2

    def test_divergence_keeps_last_good_checkpoint(self, toy_vocab, toy_sequences, tmp_path):
        path = tmp_path / "run.ckpt"
        t = _trainer(toy_vocab, toy_sequences)
        t.options.checkpoint_every = 2
        t.run(2, path)
        good = path.read_bytes()
        t.params["embeddings.token"].data[:] = np.nan
        with pytest.raises(TrainingDiverged, match="step 3"):
            t.run(2, path)
        assert path.read_bytes() == good
        assert load_checkpoint(path).step == 2
