"""Synthetic toy corpus and miniature GLUE-format task files.

Everything here is generated from a fixed seed over a made-up lexicon of
pronounceable pseudo-words, so the bundled files can be regenerated
byte-for-byte with ``python -m smallbench.toydata <out_dir>``.  The corpus
is built from facts about creatures (colour, home, food, habits), which
gives a masked-language model something learnable at toy scale.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PACKAGE_DATA = Path(__file__).parent / "data"
TOY_CORPUS = PACKAGE_DATA / "toy_corpus.txt"
TOY_GLUE = PACKAGE_DATA / "glue_mini"

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_SEED = 20210607


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str], syllables=(2, 3)) -> list[str]:
    out = []
    while len(out) < n:
        k = int(rng.integers(syllables[0], syllables[1] + 1))
        word = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(k))
        if rng.random() < 0.3:
            word += _CONSONANTS[rng.integers(len(_CONSONANTS))]
        if word not in taken:
            taken.add(word)
            out.append(word)
    return out


@dataclass
class Creature:
    name: str
    color: str
    place: str
    food: str
    verbs: tuple[str, str]
    friend: str
    hides_from: str


@dataclass
class Lexicon:
    creatures: list[Creature]
    colors: list[str]
    places: list[str]
    foods: list[str]
    verbs: list[str]
    weathers: list[str]
    good_tastes: list[str]
    bad_tastes: list[str]
    food_taste: dict[str, str]


def make_lexicon(seed: int = _SEED) -> Lexicon:
    rng = np.random.Generator(np.random.PCG64(seed))
    taken: set[str] = set()
    names = _pseudo_words(rng, 260, taken, (3, 4))
    colors = _pseudo_words(rng, 40, taken, (2, 2))
    places = _pseudo_words(rng, 70, taken, (3, 4))
    foods = _pseudo_words(rng, 160, taken, (3, 4))
    verbs = _pseudo_words(rng, 90, taken, (2, 2))
    weathers = _pseudo_words(rng, 20, taken, (2, 2))
    good = _pseudo_words(rng, 12, taken, (2, 2))
    bad = _pseudo_words(rng, 12, taken, (2, 2))
    creatures = []
    for i, name in enumerate(names):
        v = rng.choice(len(verbs), 2, replace=False)
        creatures.append(
            Creature(
                name,
                colors[rng.integers(len(colors))],
                places[rng.integers(len(places))],
                foods[rng.integers(len(foods))],
                (verbs[v[0]], verbs[v[1]]),
                names[(i + 1 + rng.integers(len(names) - 1)) % len(names)],
                weathers[rng.integers(len(weathers))],
            )
        )
    food_taste = {f: (good if rng.random() < 0.5 else bad)[rng.integers(12)] for f in foods}
    return Lexicon(creatures, colors, places, foods, verbs, weathers, good, bad, food_taste)


def fact_sentences(c: Creature, lex: Lexicon) -> list[str]:
    return [
        f"the {c.color} {c.name} lives near the {c.place} .",
        f"every {c.name} likes to {c.verbs[0]} the {c.food} .",
        f"a {c.name} can {c.verbs[1]} with a {c.friend} .",
        f"when the {c.hides_from} comes , the {c.name} hides in the {c.place} .",
        f"the {c.food} of the {c.name} is very {lex.food_taste[c.food]} .",
        f"the {c.name} and the {c.friend} {c.verbs[0]} together .",
        f"people say the {c.name} is {c.color} like the {c.food} .",
        f"in the {c.place} , a {c.name} will {c.verbs[1]} all day .",
    ]


def make_corpus(n_sentences: int = 1000, seed: int = _SEED) -> str:
    """Documents of 3-6 sentences about one creature each, separated by blank lines."""
    lex = make_lexicon(seed)
    rng = np.random.Generator(np.random.PCG64([seed, 1]))
    docs = []
    total = 0
    i = 0
    while total < n_sentences:
        c = lex.creatures[i % len(lex.creatures)]
        i += 1
        facts = fact_sentences(c, lex)
        n = min(int(rng.integers(3, 7)), n_sentences - total)
        picks = [facts[j] for j in rng.choice(len(facts), size=n, replace=n > len(facts))]
        docs.append("\n".join(picks))
        total += n
    return "\n\n".join(docs) + "\n"


# -- miniature GLUE files --------------------------------------------------


def _tsv(rows: list[list[str]]) -> str:
    return "".join("\t".join(r) + "\n" for r in rows)


def _task_rows(task: str, rng: np.random.Generator, lex: Lexicon, n: int) -> list[tuple]:
    cs = lex.creatures
    rows = []
    for _ in range(n):
        c = cs[rng.integers(len(cs))]
        other = cs[rng.integers(len(cs))]
        while other.name == c.name:
            other = cs[rng.integers(len(cs))]
        flip = bool(rng.random() < 0.5)
        if task == "CoLA":
            s = f"the {c.color} {c.name} lives near the {c.place} ."
            if flip:
                words = s.split()
                words = [words[i] for i in rng.permutation(len(words))]
                s = " ".join(words)
            rows.append((s, str(int(not flip))))
        elif task == "SST-2":
            tastes = lex.bad_tastes if flip else lex.good_tastes
            rows.append((f"the {c.food} is very {tastes[rng.integers(len(tastes))]} .", str(int(not flip))))
        elif task == "MRPC":
            b = other if flip else c
            rows.append((f"the {c.name} lives near the {c.place} .", f"near the {b.place} lives the {b.name} .", str(int(not flip))))
        elif task == "STS-B":
            a = f"the {c.color} {c.name} eats the {c.food} near the {c.place} ."
            keep = int(rng.integers(0, 4))
            parts = [c.color, c.name, c.food, c.place]
            alts = [other.color, other.name, other.food, other.place]
            mixed = parts[:keep] + alts[keep:]
            b = f"the {mixed[0]} {mixed[1]} eats the {mixed[2]} near the {mixed[3]} ."
            rows.append((a, b, f"{5.0 * keep / 4:.3f}"))
        elif task == "QQP":
            b = other if flip else c
            rows.append((f"what does the {c.name} eat ?", f"which food does a {b.name} like ?", str(int(not flip))))
        elif task == "MNLI":
            kind = int(rng.integers(3))
            p = f"the {c.color} {c.name} lives near the {c.place} ."
            h = [
                f"the {c.name} lives near the {c.place} .",
                f"the {c.name} never lives near the {c.place} .",
                f"the {c.name} likes to {c.verbs[0]} the {c.food} .",
            ][kind]
            rows.append((p, h, ["entailment", "contradiction", "neutral"][kind]))
        elif task == "QNLI":
            b = other if flip else c
            rows.append((f"where does the {c.name} live ?", f"the {b.name} lives near the {b.place} .",
                         "not_entailment" if flip else "entailment"))
        elif task == "RTE":
            h = f"the {c.name} never hides in the {c.place} ." if flip else f"the {c.name} hides in the {c.place} ."
            rows.append((f"when the {c.hides_from} comes , the {c.name} hides in the {c.place} .", h,
                         "not_entailment" if flip else "entailment"))
    return rows


def _format(task: str, rows: list[tuple], split: str) -> str:
    """Lay rows out in the column order of the public GLUE distribution."""
    if task == "CoLA":
        return _tsv([["toy", label, "*" if label == "0" else "", s] for s, label in rows])
    if task == "SST-2":
        return _tsv([["sentence", "label"]] + [[s, label] for s, label in rows])
    if task == "MRPC":
        head = ["Quality", "#1 ID", "#2 ID", "#1 String", "#2 String"]
        return _tsv([head] + [[label, str(100 + i), str(200 + i), a, b] for i, (a, b, label) in enumerate(rows)])
    if task == "STS-B":
        head = ["index", "genre", "filename", "year", "old_index", "source1", "source2", "sentence1", "sentence2", "score"]
        return _tsv([head] + [[str(i), "toy", "toy", "2021", str(i), "none", "none", a, b, s] for i, (a, b, s) in enumerate(rows)])
    if task == "QQP":
        head = ["id", "qid1", "qid2", "question1", "question2", "is_duplicate"]
        return _tsv([head] + [[str(i), str(2 * i), str(2 * i + 1), a, b, label] for i, (a, b, label) in enumerate(rows)])
    if task == "MNLI":
        head = ["index", "promptID", "pairID", "genre", "sentence1_binary_parse", "sentence2_binary_parse",
                "sentence1_parse", "sentence2_parse", "sentence1", "sentence2"]
        if split == "train":
            head += ["label1", "gold_label"]
            body = [[str(i), str(i), f"{i}e", "toy", "()", "()", "()", "()", a, b, g, g] for i, (a, b, g) in enumerate(rows)]
        else:
            head += ["label1", "label2", "label3", "label4", "label5", "gold_label"]
            body = [[str(i), str(i), f"{i}e", "toy", "()", "()", "()", "()", a, b, g, g, g, g, g, g] for i, (a, b, g) in enumerate(rows)]
        return _tsv([head] + body)
    if task == "QNLI":
        return _tsv([["index", "question", "sentence", "label"]] + [[str(i), a, b, label] for i, (a, b, label) in enumerate(rows)])
    if task == "RTE":
        return _tsv([["index", "sentence1", "sentence2", "label"]] + [[str(i), a, b, label] for i, (a, b, label) in enumerate(rows)])
    raise KeyError(task)


GLUE_DIRS = ("CoLA", "SST-2", "MRPC", "STS-B", "QQP", "MNLI", "QNLI", "RTE")


def write_toy_glue(out_dir, n_train: int = 32, n_dev: int = 16, seed: int = _SEED) -> None:
    lex = make_lexicon(seed)
    for t, task in enumerate(GLUE_DIRS):
        rng = np.random.Generator(np.random.PCG64([seed, 100 + t]))
        d = Path(out_dir) / task
        d.mkdir(parents=True, exist_ok=True)
        (d / "train.tsv").write_text(_format(task, _task_rows(task, rng, lex, n_train), "train"), encoding="utf-8")
        dev_name = "dev_matched.tsv" if task == "MNLI" else "dev.tsv"
        (d / dev_name).write_text(_format(task, _task_rows(task, rng, lex, n_dev), "dev"), encoding="utf-8")


def write_all(out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "toy_corpus.txt").write_text(make_corpus(), encoding="utf-8")
    write_toy_glue(out / "glue_mini")


if __name__ == "__main__":
    write_all(sys.argv[1] if len(sys.argv) > 1 else PACKAGE_DATA)
