"""WordPiece-style vocabulary and single/pair sequence encoders."""

from __future__ import annotations

import collections
import heapq
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
NUM_SPECIAL = len(SPECIAL_TOKENS)
CONTINUATION = "##"
MAX_WORD_CHARS = 100


class Vocab:
    """Token/id bijection with the five special tokens at ids 0-4."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError(f"vocab must start with {SPECIAL_TOKENS}")
        index = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise ValueError(f"duplicate token {tok!r} at line {i + 1}")
            index[tok] = i
        self.tokens = tokens
        self._index = index

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise IndexError(f"token id {idx} out of range [0, {len(self.tokens)})")
        return self.tokens[idx]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocab:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


@dataclass
class EncodedSequence:
    ids: list[int]
    segment_ids: list[int]
    special_mask: list[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


def normalize(text: str) -> str:
    return unicodedata.normalize("NFKC", text).lower()


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def pre_tokenize(text: str) -> list[str]:
    """Normalise, then split on whitespace and isolate punctuation characters."""
    words = []
    for chunk in normalize(text).split():
        buf = []
        for ch in chunk:
            if _is_punct(ch):
                if buf:
                    words.append("".join(buf))
                    buf = []
                words.append(ch)
            elif unicodedata.category(ch) not in ("Cc", "Cf"):
                buf.append(ch)
        if buf:
            words.append("".join(buf))
    return words


def iter_corpus_words(path) -> Iterable[str]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            yield from pre_tokenize(line)


def build_vocab(corpus_path, target_size: int = 30522, min_frequency: int = 2) -> Vocab:
    """Greedy WordPiece-style vocabulary from a text file.

    Words are split into characters, with non-initial characters carrying the
    ``##`` prefix.  The alphabet is added first (most frequent characters
    first), then the most frequent adjacent symbol pair is merged repeatedly
    until ``target_size`` entries exist or no pair reaches ``min_frequency``.
    Ties are broken lexicographically on the merged pair, so the result is a
    pure function of the corpus.
    """
    if target_size < NUM_SPECIAL:
        raise ValueError(f"target_size must be >= {NUM_SPECIAL}, got {target_size}")
    word_counts = collections.Counter(w for w in iter_corpus_words(corpus_path) if len(w) <= MAX_WORD_CHARS)
    if not word_counts:
        raise ValueError(f"corpus {corpus_path} contains no text")

    tokens = list(SPECIAL_TOKENS)
    if target_size == NUM_SPECIAL:
        return Vocab(tokens)

    words = sorted(word_counts)
    freqs = [word_counts[w] for w in words]
    splits = [[w[0]] + [CONTINUATION + c for c in w[1:]] for w in words]

    symbol_counts = collections.Counter()
    for split, f in zip(splits, freqs):
        for sym in split:
            symbol_counts[sym] += f
    alphabet = sorted(symbol_counts, key=lambda s: (-symbol_counts[s], s))
    for sym in alphabet:
        if len(tokens) >= target_size:
            return Vocab(tokens)
        tokens.append(sym)
    known = set(tokens)

    pair_counts: collections.Counter = collections.Counter()
    pair_words: dict[tuple[str, str], set[int]] = collections.defaultdict(set)
    for wi, (split, f) in enumerate(zip(splits, freqs)):
        for a, b in zip(split, split[1:]):
            pair_counts[(a, b)] += f
            pair_words[(a, b)].add(wi)

    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)
    while len(tokens) < target_size and heap:
        neg, pair = heapq.heappop(heap)
        count = pair_counts.get(pair, 0)
        if count != -neg:
            if count > 0:
                heapq.heappush(heap, (-count, pair))
            continue
        if count < min_frequency:
            break
        a, b = pair
        merged = a + (b[len(CONTINUATION):] if b.startswith(CONTINUATION) else b)
        if merged not in known:
            tokens.append(merged)
            known.add(merged)
        touched: collections.Counter = collections.Counter()
        for wi in sorted(pair_words.pop(pair, ())):
            split, f = splits[wi], freqs[wi]
            for x, y in zip(split, split[1:]):
                pair_counts[(x, y)] -= f
                touched[(x, y)] += 0
            out, i = [], 0
            while i < len(split):
                if i + 1 < len(split) and split[i] == a and split[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(split[i])
                    i += 1
            splits[wi] = out
            for x, y in zip(out, out[1:]):
                pair_counts[(x, y)] += f
                pair_words[(x, y)].add(wi)
                touched[(x, y)] += 0
        for p in touched:
            c = pair_counts[p]
            if c <= 0:
                pair_counts.pop(p, None)
            else:
                heapq.heappush(heap, (-c, p))
    return Vocab(tokens)


def wordpiece(word: str, vocab: Vocab) -> list[int]:
    """Greedy longest-match-first split of one pre-tokenized word."""
    if len(word) > MAX_WORD_CHARS:
        return [UNK_ID]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            if piece in vocab:
                found = piece
                break
            end -= 1
        if found is None:
            return [UNK_ID]
        pieces.append(vocab.id(found))
        start = end
    return pieces


def tokenize(text: str, vocab: Vocab) -> list[int]:
    ids = []
    for word in pre_tokenize(text):
        ids.extend(wordpiece(word, vocab))
    return ids


def _finish(ids: list[int], segments: list[int], max_len: int, pad: bool) -> EncodedSequence:
    if pad and len(ids) < max_len:
        extra = max_len - len(ids)
        ids = ids + [PAD_ID] * extra
        segments = segments + [0] * extra
    special = [i in (CLS_ID, SEP_ID, PAD_ID) for i in ids]
    return EncodedSequence(ids, segments, special)


def encode_ids_single(pieces: list[int], max_len: int, pad: bool = True) -> EncodedSequence:
    pieces = pieces[: max_len - 2]
    ids = [CLS_ID, *pieces, SEP_ID]
    return _finish(ids, [0] * len(ids), max_len, pad)


def truncate_pair(a: list[int], b: list[int], budget: int) -> tuple[list[int], list[int]]:
    """Drop tokens from the end of the longer side until both fit in ``budget``."""
    a, b = list(a), list(b)
    while len(a) + len(b) > budget:
        if len(a) > len(b):
            a.pop()
        else:
            b.pop()
    return a, b


def encode_ids_pair(a: list[int], b: list[int], max_len: int, pad: bool = True) -> EncodedSequence:
    a, b = truncate_pair(a, b, max_len - 3)
    ids = [CLS_ID, *a, SEP_ID, *b, SEP_ID]
    segments = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    return _finish(ids, segments, max_len, pad)


def encode_single(text: str, vocab: Vocab, max_len: int, pad: bool = True) -> EncodedSequence:
    if max_len < 3:
        raise ValueError("max_len must be >= 3 for single sequences")
    return encode_ids_single(tokenize(text, vocab), max_len, pad)


def encode_pair(a: str, b: str, vocab: Vocab, max_len: int, pad: bool = True) -> EncodedSequence:
    if max_len < 5:
        raise ValueError("max_len must be >= 5 for sequence pairs")
    return encode_ids_pair(tokenize(a, vocab), tokenize(b, vocab), max_len, pad)


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    words: list[str] = []
    for idx in ids:
        tok = vocab.token(int(idx))
        if int(idx) < NUM_SPECIAL and tok != UNK:
            continue
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)
