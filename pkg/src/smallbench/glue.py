"""GLUE task definitions, TSV loading, classification/regression heads and fine-tuning."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import collate
from .encoder import ModelConfig, Params, encoder_forward
from .metrics import accuracy, mcc, spearman
from .objectives import downstream_prefix
from .optim import (
    OptimState,
    Schedule,
    adamw_step,
    clip_grad_norm,
    collect_grads,
    layerwise_lrs,
    lr_at_step,
    parameter_group,
    zero_grads,
)
from .tensor import Tensor, new_rng
from .tokenizer import Vocab, encode_pair, encode_single

MALFORMED_LIMIT = 0.01


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    directory: str
    arity: Literal["single", "pair"]
    kind: Literal["binary", "multiclass", "regression"]
    metric: Literal["mcc", "accuracy", "spearman"]
    text_a: int
    label: int
    text_b: int | None = None
    header: bool = True
    num_columns: int | None = None  # None: take the width from the header row
    labels: tuple[str, ...] | None = None  # None: numeric labels
    dev_file: str = "dev.tsv"

    @property
    def num_outputs(self) -> int:
        if self.kind == "regression":
            return 1
        return len(self.labels) if self.labels else 2


# Column layouts of the public GLUE distribution (0-based).
TASKS: dict[str, TaskSpec] = {
    "CoLA": TaskSpec("CoLA", "CoLA", "single", "binary", "mcc", text_a=3, label=1, header=False, num_columns=4,
                     labels=("0", "1")),
    "SST": TaskSpec("SST", "SST-2", "single", "binary", "accuracy", text_a=0, label=1, labels=("0", "1")),
    "MRPC": TaskSpec("MRPC", "MRPC", "pair", "binary", "accuracy", text_a=3, text_b=4, label=0, labels=("0", "1")),
    "STS": TaskSpec("STS", "STS-B", "pair", "regression", "spearman", text_a=7, text_b=8, label=9),
    "QQP": TaskSpec("QQP", "QQP", "pair", "binary", "accuracy", text_a=3, text_b=4, label=5, labels=("0", "1")),
    "MNLI": TaskSpec("MNLI", "MNLI", "pair", "multiclass", "accuracy", text_a=8, text_b=9, label=-1,
                     labels=("contradiction", "entailment", "neutral"), dev_file="dev_matched.tsv"),
    "QNLI": TaskSpec("QNLI", "QNLI", "pair", "binary", "accuracy", text_a=1, text_b=2, label=3,
                     labels=("entailment", "not_entailment")),
    "RTE": TaskSpec("RTE", "RTE", "pair", "binary", "accuracy", text_a=1, text_b=2, label=3,
                    labels=("entailment", "not_entailment")),
}
TASK_ORDER = ("CoLA", "SST", "MRPC", "STS", "QQP", "MNLI", "QNLI", "RTE")

_OVERRIDABLE = {"directory": str, "text_a": int, "text_b": int, "label": int, "header": bool,
                "num_columns": int, "dev_file": str}


def apply_column_overrides(path, tasks: dict[str, TaskSpec] | None = None) -> dict[str, TaskSpec]:
    """Read ``TASK.field = value`` lines (``#`` comments) and return updated task specs."""
    tasks = dict(tasks or TASKS)
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        task, _, attr = key.strip().partition(".")
        if not sep or task not in tasks or attr not in _OVERRIDABLE:
            raise DataError(f"{path}:{lineno}: cannot override {key.strip()!r}")
        value = value.strip()
        typ = _OVERRIDABLE[attr]
        if typ is bool:
            parsed = value.lower() in ("1", "true", "yes")
        elif typ is int:
            parsed = None if value.lower() == "none" else int(value)
        else:
            parsed = value
        tasks[task] = replace(tasks[task], **{attr: parsed})
    return tasks


@dataclass
class Example:
    text_a: str
    text_b: str | None
    label: float | int


@dataclass
class LoadedSplit:
    examples: list[Example]
    malformed: int = 0


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir is None:
        data_dir = os.environ.get("SMALLBENCH_DATA_DIR")
    if not data_dir:
        raise DataError("no GLUE data directory given (set --glue-dir or SMALLBENCH_DATA_DIR)")
    return Path(data_dir)


def task_file(spec: TaskSpec, data_dir, split: str) -> Path:
    if split not in ("train", "dev"):
        raise ValueError(f"unknown split {split!r}")
    return resolve_data_dir(data_dir) / spec.directory / ("train.tsv" if split == "train" else spec.dev_file)


def parse_label(spec: TaskSpec, raw: str):
    raw = raw.strip()
    if spec.kind == "regression":
        value = float(raw)
        if not 0.0 <= value <= 5.0 or math.isnan(value):
            raise ValueError(f"label {value} outside [0, 5]")
        return value
    if raw not in spec.labels:
        raise ValueError(f"unknown label {raw!r}")
    return spec.labels.index(raw)


def load_task(spec: TaskSpec, data_dir, split: str) -> LoadedSplit:
    """Parse one TSV split; malformed rows are skipped unless they exceed 1% of rows."""
    path = task_file(spec, data_dir, split)
    if not path.is_file():
        raise FileNotFoundError(f"missing GLUE file {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    width = spec.num_columns
    if spec.header and lines:
        header = lines.pop(0).split("\t")
        width = width or len(header)
    rows = [ln for ln in lines if ln.strip()]
    if not rows:
        raise DataError(f"{path} has no data rows")
    examples, bad = [], 0
    for line in rows:
        cols = line.split("\t")
        try:
            if width is not None and len(cols) != width:
                raise ValueError("column count")
            label = parse_label(spec, cols[spec.label])
            a = cols[spec.text_a]
            b = cols[spec.text_b] if spec.text_b is not None else None
        except (ValueError, IndexError):
            bad += 1
            continue
        examples.append(Example(a, b, label))
    if bad > MALFORMED_LIMIT * len(rows):
        raise DataError(f"{path}: {bad} of {len(rows)} rows malformed (limit {MALFORMED_LIMIT:.0%})")
    if not examples:
        raise DataError(f"{path} has no usable rows")
    return LoadedSplit(examples, bad)


def score(spec: TaskSpec, preds, golds) -> float:
    if spec.metric == "mcc":
        return mcc(preds, golds)
    if spec.metric == "spearman":
        return spearman(preds, golds)
    return accuracy(preds, golds)


# -- model -----------------------------------------------------------------


def init_task_head(hidden: int, spec: TaskSpec, rng, dtype=np.float32) -> Params:
    return {
        "head.weight": Tensor(T.truncated_normal(rng, (hidden, spec.num_outputs), 0.02, dtype), requires_grad=True),
        "head.bias": Tensor(np.zeros(spec.num_outputs, dtype), requires_grad=True),
    }


def task_head_forward(cls_hidden: Tensor, spec: TaskSpec, params: Params, *, dropout_p: float = 0.0,
                      rng=None, training: bool = False) -> Tensor:
    """[B, hidden] -> [B, classes] logits, or [B] scores for regression."""
    x = T.dropout(cls_hidden, dropout_p, rng, training)
    out = T.linear(x, params["head.weight"], params["head.bias"])
    return out.reshape(out.shape[0]) if spec.kind == "regression" else out


def task_loss(outputs: Tensor, labels: np.ndarray, spec: TaskSpec) -> Tensor:
    if spec.kind == "regression":
        diff = outputs - Tensor(np.asarray(labels, dtype=outputs.dtype))
        return (diff * diff).mean()
    return T.cross_entropy(outputs, np.asarray(labels, dtype=np.int64))


def predictions(outputs: Tensor, spec: TaskSpec) -> np.ndarray:
    if spec.kind == "regression":
        return outputs.data.astype(np.float64)
    return outputs.data.argmax(axis=-1)


@dataclass
class FinetuneHyper:
    lr: float = 1e-4
    batch: int = 32
    epochs: int = 3
    layer_decay: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch < 1 or self.epochs < 0:
            raise ValueError(f"invalid fine-tuning hyperparameters {self}")
        if not 0.0 < self.layer_decay <= 1.0:
            raise ValueError("layer_decay must lie in (0, 1]")


@dataclass
class FinetuneResult:
    score: float
    params: Params
    config: ModelConfig
    prefix: str
    history: list[float] = field(default_factory=list)

    @property
    def head(self) -> Params:
        return {k: v for k, v in self.params.items() if k.startswith("head.")}


def downstream_params(ckpt: Checkpoint) -> tuple[Params, str]:
    """Copy the fine-tunable encoder (never the generator) out of a pretraining checkpoint."""
    prefix = downstream_prefix(ckpt.config)
    keep = {}
    for name, arr in ckpt.tensors.items():
        if name.startswith("embeddings.") or name.startswith(prefix) or name.startswith("head."):
            keep[name] = Tensor(arr.copy(), requires_grad=True)
    return keep, prefix


def encode_examples(examples: list[Example], vocab: Vocab, max_len: int):
    out = []
    for ex in examples:
        if ex.text_b is None:
            out.append(encode_single(ex.text_a, vocab, max_len, pad=False))
        else:
            out.append(encode_pair(ex.text_a, ex.text_b, vocab, max_len, pad=False))
    return out


def _forward(config, params, prefix, spec, seqs, *, rng=None, training=False):
    batch = collate(seqs)
    hidden = encoder_forward(config, params, batch, prefix=prefix, rng=rng, training=training)
    return task_head_forward(hidden[:, 0], spec, params, dropout_p=config.dropout, rng=rng, training=training)


def evaluate(config, params, prefix, spec, examples, vocab, batch_size: int = 64) -> float:
    seqs = encode_examples(examples, vocab, config.max_len)
    preds = []
    with T.no_grad():
        for i in range(0, len(seqs), batch_size):
            preds.append(predictions(_forward(config, params, prefix, spec, seqs[i:i + batch_size]), spec))
    golds = np.array([ex.label for ex in examples])
    return score(spec, np.concatenate(preds), golds)


def check_architecture(config: ModelConfig, objective: str | None, attention_kind: str | None) -> None:
    if objective is not None and config.objective != objective:
        raise ValueError(f"checkpoint objective {config.objective!r} does not match requested {objective!r}")
    if attention_kind is not None and config.attention_kind != attention_kind:
        raise ValueError(f"checkpoint attention {config.attention_kind!r} does not match requested {attention_kind!r}")


def finetune(
    ckpt: Checkpoint,
    spec: TaskSpec,
    hyper: FinetuneHyper,
    train: list[Example],
    dev: list[Example],
    vocab: Vocab | None = None,
    *,
    objective: str | None = None,
    attention_kind: str | None = None,
) -> FinetuneResult:
    """Fine-tune the downstream encoder plus a fresh [CLS] head and score it on ``dev``.

    Learning rates follow warmup over the first 10% of steps then linear decay,
    scaled per layer by ``hyper.layer_decay``.  ``ckpt`` is never modified.
    """
    check_architecture(ckpt.config, objective, attention_kind)
    if not train or not dev:
        raise DataError(f"{spec.name}: empty train or dev data")
    vocab = vocab or Vocab(ckpt.meta["vocab"])
    config = ckpt.config
    params, prefix = downstream_params(ckpt)
    rng = new_rng([hyper.seed, 0xF17E])
    params.update(init_task_head(config.hidden, spec, rng))

    seqs = encode_examples(train, vocab, config.max_len)
    labels = np.array([ex.label for ex in train])
    steps_per_epoch = math.ceil(len(seqs) / hyper.batch)
    total = hyper.epochs * steps_per_epoch
    history: list[float] = []
    if total:
        schedule = Schedule(hyper.lr, total, warmup_fraction=0.1)
        group_rates = layerwise_lrs(1.0, hyper.layer_decay, config.num_layers)
        scale = {name: group_rates[parameter_group(name)] for name in params}
        state = OptimState()
        step = 0
        for _ in range(hyper.epochs):
            order = rng.permutation(len(seqs))
            for start in range(0, len(seqs), hyper.batch):
                idx = order[start:start + hyper.batch]
                zero_grads(params)
                out = _forward(config, params, prefix, spec, [seqs[i] for i in idx], rng=rng, training=True)
                loss = task_loss(out, labels[idx], spec)
                loss.backward()
                grads = collect_grads(params)
                clip_grad_norm(grads, 1.0)
                step += 1
                lr = lr_at_step(step, schedule)
                adamw_step(params, grads, state, {n: lr * s for n, s in scale.items()})
                history.append(float(loss.data))
    result = evaluate(config, params, prefix, spec, dev, vocab)
    return FinetuneResult(result, params, config, prefix, history)


def finetuned_checkpoint(result: FinetuneResult, spec: TaskSpec, source: Checkpoint, hyper: FinetuneHyper) -> Checkpoint:
    meta = {
        "kind": "finetuned",
        "task": spec.name,
        "vocab": source.meta.get("vocab"),
        "prefix": result.prefix,
        "score": result.score,
        "hyper": {"lr": hyper.lr, "batch": hyper.batch, "epochs": hyper.epochs,
                  "layer_decay": hyper.layer_decay, "seed": hyper.seed},
    }
    return Checkpoint(result.config, {k: v.data.copy() for k, v in result.params.items()}, source.step, meta=meta)


def evaluate_checkpoint(ckpt: Checkpoint, spec: TaskSpec, dev: list[Example]) -> float:
    if ckpt.meta.get("kind") != "finetuned":
        raise ValueError("evaluation needs a fine-tuned checkpoint (with a task head)")
    if ckpt.meta.get("task") != spec.name:
        raise ValueError(f"checkpoint was fine-tuned on {ckpt.meta.get('task')}, not {spec.name}")
    params = {k: Tensor(v) for k, v in ckpt.tensors.items()}
    return evaluate(ckpt.config, params, ckpt.meta["prefix"], spec, dev, Vocab(ckpt.meta["vocab"]))
