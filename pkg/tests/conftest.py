from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from smallbench.data import ingest_corpus
from smallbench.encoder import ModelConfig
from smallbench.glue import Example
from smallbench.optim import Schedule
from smallbench.tokenizer import Vocab, build_vocab
from smallbench.toydata import TOY_CORPUS
from smallbench.train import Pretrainer, TrainOptions


def toy_config(**overrides) -> ModelConfig:
    """The toy-scale model used across tests (2 layers, hidden 64)."""
    base = dict(
        num_layers=2, hidden=64, heads=2, ffn_inner=256, embedding_dim=64, vocab_size=2000,
        max_len=64, max_relative_distance=32,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_config(**overrides) -> ModelConfig:
    """Small enough for exhaustive finite differences."""
    base = dict(
        num_layers=2, hidden=8, heads=2, ffn_inner=12, embedding_dim=6, vocab_size=23,
        max_len=8, max_relative_distance=3, dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def toy_vocab() -> Vocab:
    return build_vocab(TOY_CORPUS, 2000, 1)


@pytest.fixture(scope="session")
def toy_sequences(toy_vocab):
    return list(ingest_corpus(TOY_CORPUS, toy_vocab, "pair", 64))


@pytest.fixture(scope="session")
def toy_checkpoint(toy_vocab, toy_sequences):
    """A briefly pretrained ELECTRA-DeBERTa toy checkpoint (vocab stored in meta)."""
    config = toy_config(vocab_size=len(toy_vocab))
    trainer = Pretrainer(config, toy_sequences, Schedule(1e-3, 300, warmup_steps=30), seed=0,
                         options=TrainOptions(batch_size=16, log_every=0), meta={"vocab": toy_vocab.tokens})
    trainer.run(300)
    return trainer.checkpoint()


@pytest.fixture
def no_dropout():
    def strip(ckpt):
        return replace(ckpt, config=replace(ckpt.config, dropout=0.0))
    return strip


def template_task(n: int = 20) -> list[Example]:
    """Synthetic binary task over corpus sentences: 'lives near' facts vs 'can ... with' facts."""
    lines = [ln for ln in Path(TOY_CORPUS).read_text(encoding="utf-8").splitlines() if ln]
    pos = [ln for ln in lines if " lives near " in ln][: n // 2]
    neg = [ln for ln in lines if " can " in ln][: n - n // 2]
    return [Example(s, None, 1) for s in pos] + [Example(s, None, 0) for s in neg]


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
