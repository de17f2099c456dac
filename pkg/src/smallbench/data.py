"""Corpus ingestion, shuffled batching and dynamic masking for pretraining.

Corpus format: UTF-8 text, one sentence per line, documents separated by
blank lines.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Literal

import numpy as np

from .tokenizer import (
    CLS_ID,
    MASK_ID,
    NUM_SPECIAL,
    PAD_ID,
    SEP_ID,
    EncodedSequence,
    Vocab,
    encode_ids_pair,
    encode_ids_single,
    tokenize,
)

IGNORE_ID = -100
SHUFFLE_BUFFER = 10_000

Mode = Literal["pair", "contiguous"]


@dataclass
class TokenBatch:
    ids: np.ndarray  # [B, L] int64
    segment_ids: np.ndarray  # [B, L] int64
    pad_mask: np.ndarray  # [B, L] bool, true on real tokens
    mlm_labels: np.ndarray | None = None  # [B, L] int64, IGNORE_ID where unmasked

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def special_mask(self) -> np.ndarray:
        return (self.ids == CLS_ID) | (self.ids == SEP_ID) | ~self.pad_mask

    def eligible(self) -> np.ndarray:
        """Positions that may be masked: real tokens other than [CLS]/[SEP]."""
        return self.pad_mask & (self.ids != CLS_ID) & (self.ids != SEP_ID) & (self.ids != PAD_ID)


@dataclass(frozen=True)
class MaskingPolicy:
    mask_prob: float = 0.15
    replace_with_mask: float = 0.8
    replace_with_random: float = 0.1
    keep_original: float = 0.1

    def __post_init__(self):
        for name in ("mask_prob", "replace_with_mask", "replace_with_random", "keep_original"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        total = self.replace_with_mask + self.replace_with_random + self.keep_original
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"replacement fractions must sum to 1, got {total}")


def read_documents(path) -> list[list[str]]:
    """Split a corpus file into documents (lists of non-empty sentence lines)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    docs: list[list[str]] = []
    current: list[str] = []
    for line in text.splitlines():
        line = line.strip()
        if line:
            current.append(line)
        elif current:
            docs.append(current)
            current = []
    if current:
        docs.append(current)
    if not docs:
        raise ValueError(f"corpus {path} is empty")
    return docs


def ingest_corpus(path, vocab: Vocab, mode: Mode = "pair", max_len: int = 128) -> Iterator[EncodedSequence]:
    """Yield unpadded encoded sequences from a corpus file.

    ``pair`` mode joins consecutive sentences two at a time as
    ``[CLS] A [SEP] B [SEP]``; an odd trailing sentence becomes a single
    segment.  ``contiguous`` mode packs consecutive sentences of one document
    into sequences of at most ``max_len`` tokens, splitting any sentence that
    alone exceeds the budget.
    """
    if mode not in ("pair", "contiguous"):
        raise ValueError(f"unknown ingestion mode {mode!r}")
    docs = read_documents(path)
    for doc in docs:
        pieces = [tokenize(s, vocab) for s in doc]
        if mode == "pair":
            for i in range(0, len(pieces), 2):
                if i + 1 < len(pieces):
                    yield encode_ids_pair(pieces[i], pieces[i + 1], max_len, pad=False)
                else:
                    yield encode_ids_single(pieces[i], max_len, pad=False)
        else:
            yield from _pack_contiguous(pieces, max_len)


def _pack_contiguous(sentences: list[list[int]], max_len: int) -> Iterator[EncodedSequence]:
    budget = max_len - 2
    chunk: list[int] = []
    for sent in sentences:
        if chunk and len(chunk) + len(sent) > budget:
            yield encode_ids_single(chunk, max_len, pad=False)
            chunk = []
        while len(sent) > budget:
            yield encode_ids_single(sent[:budget], max_len, pad=False)
            sent = sent[budget:]
        chunk.extend(sent)
    if chunk:
        yield encode_ids_single(chunk, max_len, pad=False)


def buffer_shuffle(items: Iterable, rng: np.random.Generator, buffer_size: int = SHUFFLE_BUFFER) -> Iterator:
    """Bounded-memory shuffle.

    The first ``buffer_size`` items fill a buffer.  Each later item draws
    ``j = rng.integers(0, len(buffer))``, emits ``buffer[j]`` and takes its
    slot.  At end of input the buffer is emitted in the order given by
    ``rng.permutation(len(buffer))``.
    """
    buffer = []
    for item in items:
        if len(buffer) < buffer_size:
            buffer.append(item)
            continue
        j = int(rng.integers(0, len(buffer)))
        yield buffer[j]
        buffer[j] = item
    for j in rng.permutation(len(buffer)):
        yield buffer[int(j)]


def collate(seqs: list[EncodedSequence]) -> TokenBatch:
    """Right-pad sequences to the longest one in the batch."""
    width = max(len(s.ids) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    segs = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        n = len(s.ids)
        ids[r, :n] = s.ids
        segs[r, :n] = s.segment_ids
        mask[r, :n] = np.asarray(s.ids) != PAD_ID
    return TokenBatch(ids, segs, mask)


def make_batches(
    stream: Iterable[EncodedSequence],
    batch_size: int,
    rng: np.random.Generator,
    drop_last: bool = False,
    buffer_size: int = SHUFFLE_BUFFER,
) -> Iterator[TokenBatch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pending: list[EncodedSequence] = []
    for seq in buffer_shuffle(stream, rng, buffer_size):
        pending.append(seq)
        if len(pending) == batch_size:
            yield collate(pending)
            pending = []
    if pending and not drop_last:
        yield collate(pending)


def dynamic_mask(batch: TokenBatch, policy: MaskingPolicy, rng: np.random.Generator, vocab_size: int) -> TokenBatch:
    """Draw a fresh MLM mask for ``batch``.

    Each eligible position is selected with ``policy.mask_prob``.  Selected
    positions keep their original id as the label and have their input
    replaced by [MASK], by a uniformly drawn non-special token, or left as is,
    in the policy's proportions.  Draw order: one uniform per position for
    selection, one per position for the replacement choice, then one integer
    per position for random tokens.
    """
    if batch.mlm_labels is not None:
        raise ValueError("batch already carries MLM labels")
    shape = batch.ids.shape
    eligible = batch.eligible()
    selected = (rng.random(shape) < policy.mask_prob) & eligible
    choice = rng.random(shape)
    random_ids = rng.integers(NUM_SPECIAL, vocab_size, size=shape)

    labels = np.where(selected, batch.ids, IGNORE_ID)
    to_mask = selected & (choice < policy.replace_with_mask)
    to_random = selected & (choice >= policy.replace_with_mask) & (
        choice < policy.replace_with_mask + policy.replace_with_random
    )
    ids = batch.ids.copy()
    ids[to_mask] = MASK_ID
    ids[to_random] = random_ids[to_random]
    return replace(batch, ids=ids, mlm_labels=labels)


class EpochIterator:
    """Reproducible multi-epoch batch stream over an in-memory sequence list.

    Epoch ``e`` shuffles with ``PCG64([seed, e])``, so the position
    ``(epoch, batch_index)`` is enough to resume the stream exactly.
    """

    def __init__(self, sequences: list[EncodedSequence], batch_size: int, seed: int, drop_last: bool = True):
        if not sequences:
            raise ValueError("no sequences to batch")
        if drop_last and len(sequences) < batch_size:
            raise ValueError(f"{len(sequences)} sequences cannot fill one batch of {batch_size}")
        self.sequences = sequences
        self.batch_size = batch_size
        self.seed = seed
        self.drop_last = drop_last
        self.epoch = 0
        self.index = 0
        self._batches: list[TokenBatch] | None = None

    def _epoch_batches(self, epoch: int) -> list[TokenBatch]:
        rng = np.random.Generator(np.random.PCG64([self.seed, epoch]))
        return list(make_batches(self.sequences, self.batch_size, rng, self.drop_last))

    def position(self) -> tuple[int, int]:
        return self.epoch, self.index

    def seek(self, epoch: int, index: int) -> None:
        self.epoch, self.index = epoch, index
        self._batches = None

    def __iter__(self):
        return self

    def __next__(self) -> TokenBatch:
        if self._batches is None:
            self._batches = self._epoch_batches(self.epoch)
        if self.index >= len(self._batches):
            self.epoch += 1
            self.index = 0
            self._batches = self._epoch_batches(self.epoch)
        batch = self._batches[self.index]
        self.index += 1
        return batch
