"""``smallbench`` command line: build-vocab, pretrain, finetune, eval, bench, report.

Failures print one line ``smallbench-error: <Kind>: <message>`` to stderr
and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .bench import BenchPlan, MetricReport, render_leaderboard, run_benchmark
from .checkpoint import load_checkpoint, save_checkpoint
from .config import KEYS, RunConfig, canonical, parse_config
from .data import MaskingPolicy, ingest_corpus
from .encoder import count_parameters
from .glue import (
    TASKS,
    FinetuneHyper,
    apply_column_overrides,
    evaluate_checkpoint,
    finetune,
    finetuned_checkpoint,
    load_task,
    resolve_data_dir,
)
from .optim import Schedule
from .tokenizer import Vocab, build_vocab
from .train import Pretrainer, TrainOptions

log = logging.getLogger("smallbench")

ERROR_PREFIX = "smallbench-error"
COMMANDS = ("build-vocab", "pretrain", "finetune", "eval", "bench", "report")


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    settings = common.add_argument_group("settings (override the config file)")
    for key, spec in KEYS.items():
        if spec.parse.__name__ == "_bool":
            settings.add_argument(_flag(key), dest=key, action="store_const", const="true",
                                  help=spec.doc.replace("%", "%%"))
        else:
            settings.add_argument(_flag(key), dest=key, metavar=key.upper(),
                                  help=spec.doc.replace("%", "%%"))

    parser = argparse.ArgumentParser(
        prog="smallbench",
        description="Small-model pretraining (MLM / replaced-token detection) and GLUE benchmarking.",
    )
    parser.add_argument("--version", action="version", version=f"smallbench {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.add_parser("build-vocab", parents=[common], help="build a WordPiece vocabulary from the corpus")
    sub.add_parser("pretrain", parents=[common], help="pretrain the selected variant")
    sub.add_parser("finetune", parents=[common], help="fine-tune a checkpoint on one task")
    sub.add_parser("eval", parents=[common], help="score a fine-tuned checkpoint on a task's dev set")
    sub.add_parser("bench", parents=[common], help="best-of-N fine-tuning over the 8 tasks")
    rep = sub.add_parser("report", parents=[common], help="render a leaderboard from saved reports")
    rep.add_argument("reports", nargs="*", help="report.json files (default: OUT_DIR/report.json)")
    return parser


def _settings(args: argparse.Namespace) -> RunConfig:
    overrides = {key: getattr(args, key) for key in KEYS if getattr(args, key, None) is not None}
    return parse_config(args.config, overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


# -- commands --------------------------------------------------------------


def cmd_build_vocab(cfg: RunConfig) -> int:
    cfg.require("corpus")
    corpus = _require_file(cfg.corpus, "corpus")
    target = Path(cfg.vocab) if cfg.vocab else _out_dir(cfg) / "vocab.txt"
    vocab = build_vocab(corpus, cfg.vocab_size, cfg.min_frequency)
    target.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(target)
    _emit({"command": "build-vocab", "vocab": str(target), "size": len(vocab)})
    return 0


def _load_or_build_vocab(cfg: RunConfig, corpus: Path) -> tuple[Vocab, Path]:
    path = Path(cfg.vocab) if cfg.vocab else Path(cfg.out_dir) / "vocab.txt"
    if path.is_file():
        return Vocab.load(path), path
    if cfg.vocab:
        raise FileNotFoundError(f"vocab not found: {path}")
    vocab = build_vocab(corpus, cfg.vocab_size, cfg.min_frequency)
    vocab.save(path)
    return vocab, path


def cmd_pretrain(cfg: RunConfig) -> int:
    cfg.require("corpus")
    corpus = _require_file(cfg.corpus, "corpus")
    out = _out_dir(cfg)
    vocab, vocab_path = _load_or_build_vocab(cfg, corpus)
    model = cfg.model_config(len(vocab))
    sequences = list(ingest_corpus(corpus, vocab, cfg.input_mode, cfg.max_len))
    if not sequences:
        raise ValueError(f"corpus {corpus} produced no training sequences")
    schedule = Schedule(cfg.peak_lr, cfg.total_steps, warmup_steps=cfg.warmup)
    options = TrainOptions(
        batch_size=cfg.batch_size,
        clip_norm=cfg.clip_norm,
        weight_decay=cfg.weight_decay,
        log_every=cfg.log_every,
        checkpoint_every=cfg.checkpoint_every,
        grad_accum=cfg.grad_accum,
        policy=MaskingPolicy(mask_prob=cfg.mask_prob),
    )
    ckpt_path = Path(cfg.checkpoint) if cfg.checkpoint else out / "pretrain.ckpt"
    log_path = out / "pretrain_log.jsonl"
    if cfg.resume and ckpt_path.is_file():
        trainer = Pretrainer.from_checkpoint(load_checkpoint(ckpt_path), sequences, schedule, options)
        mode = "a"
    else:
        meta = {
            "variant": cfg.model,
            "label": cfg.model_label,
            "input_mode": cfg.input_mode,
            "vocab": list(vocab.tokens),
        }
        trainer = Pretrainer(model, sequences, schedule, cfg.seed, options, meta)
        mode = "w"
    end = cfg.total_steps if cfg.stop_after is None else min(cfg.stop_after, cfg.total_steps)
    remaining = max(0, end - trainer.step)
    with open(log_path, mode, encoding="utf-8") as fh:
        for _ in range(remaining):
            record = trainer.train_step()
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            if options.log_every and trainer.step % options.log_every == 0:
                fh.flush()
                log.info("step %d loss %.4f", trainer.step, record["total"])
            if options.checkpoint_every and trainer.step % options.checkpoint_every == 0:
                save_checkpoint(trainer.checkpoint(), ckpt_path)
    save_checkpoint(trainer.checkpoint(), ckpt_path)
    last = trainer.history[-1] if trainer.history else {}
    _emit({"command": "pretrain", "checkpoint": str(ckpt_path), "log": str(log_path), "vocab": str(vocab_path),
           "step": trainer.step, "final": last})
    return 0


def _task(cfg: RunConfig):
    cfg.require("task")
    tasks = apply_column_overrides(cfg.columns_file) if cfg.columns_file else TASKS
    if cfg.task not in tasks:
        raise ValueError(f"unknown task {cfg.task!r}; expected one of {list(tasks)}")
    return tasks[cfg.task]


def _first_hyper(cfg: RunConfig) -> FinetuneHyper:
    return FinetuneHyper(
        lr=cfg.lrs[0],
        batch=cfg.finetune_batch_sizes[0],
        epochs=cfg.finetune_epochs[0],
        layer_decay=cfg.decays[0],
        seed=cfg.seed,
    )


def cmd_finetune(cfg: RunConfig) -> int:
    cfg.require("checkpoint")
    ckpt_path = _require_file(cfg.checkpoint, "checkpoint")
    spec = _task(cfg)
    data_dir = resolve_data_dir(cfg.glue_dir)
    ckpt = load_checkpoint(ckpt_path)
    hyper = _first_hyper(cfg)
    result = finetune(ckpt, spec, hyper, load_task(spec, data_dir, "train").examples,
                      load_task(spec, data_dir, "dev").examples)
    target = _out_dir(cfg) / f"finetune_{spec.name}.ckpt"
    save_checkpoint(finetuned_checkpoint(result, spec, ckpt, hyper), target)
    _emit({"command": "finetune", "task": spec.name, "metric": spec.metric, "score": result.score,
           "checkpoint": str(target)})
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    cfg.require("checkpoint")
    ckpt = load_checkpoint(_require_file(cfg.checkpoint, "checkpoint"))
    spec = _task(cfg)
    dev = load_task(spec, resolve_data_dir(cfg.glue_dir), "dev").examples
    value = evaluate_checkpoint(ckpt, spec, dev)
    _emit({"command": "eval", "task": spec.name, "metric": spec.metric, "score": value})
    return 0


@dataclass
class TaskRunner:
    """Picklable fine-tuning job used by ``bench`` (also across processes)."""

    checkpoint: str
    data_dir: str
    columns_file: str | None = None

    def __call__(self, task: str, hyper: FinetuneHyper) -> float:
        tasks = apply_column_overrides(self.columns_file) if self.columns_file else TASKS
        spec = tasks[task]
        ckpt = load_checkpoint(self.checkpoint)
        train = load_task(spec, self.data_dir, "train").examples
        dev = load_task(spec, self.data_dir, "dev").examples
        return finetune(ckpt, spec, hyper, train, dev).score


def cmd_bench(cfg: RunConfig) -> int:
    cfg.require("checkpoint")
    ckpt_path = _require_file(cfg.checkpoint, "checkpoint")
    data_dir = resolve_data_dir(cfg.glue_dir)
    for spec in TASKS.values():
        _require_file(Path(data_dir) / spec.directory / "train.tsv", f"{spec.name} training data")
    ckpt = load_checkpoint(ckpt_path)
    variant = ckpt.meta.get("variant", cfg.model)
    label = cfg.label or ckpt.meta.get("label") or cfg.model_label
    metadata = {
        "variant": variant,
        "objective": ckpt.config.objective,
        "attention_kind": ckpt.config.attention_kind,
        "input_mode": ckpt.meta.get("input_mode"),
        "pretrain_steps": ckpt.step,
        "seed": cfg.seed,
        "runs_per_task": cfg.runs_per_task,
    }
    if variant == "bert" and ckpt.meta.get("input_mode") == "contiguous":
        metadata["note"] = "BERT variant with contiguous inputs stands in for RoBERTa"
    plan = BenchPlan(
        model=label,
        params=count_parameters(ckpt.config),
        runs_per_task=cfg.runs_per_task,
        seed=cfg.seed,
        lrs=cfg.lrs,
        layer_decays=cfg.decays,
        batch_sizes=cfg.finetune_batch_sizes,
        epochs=cfg.finetune_epochs,
        jobs=cfg.jobs,
        metadata=metadata,
    )
    report_path = _out_dir(cfg) / "report.json"
    runner = TaskRunner(str(ckpt_path), str(data_dir), cfg.columns_file)
    report = run_benchmark(plan, runner, report_path)
    _emit({"command": "bench", "report": str(report_path), "average": report.average,
           "best": report.best_scores()})
    return 0


def cmd_report(cfg: RunConfig, paths: list[str]) -> int:
    out = Path(cfg.out_dir)
    sources = [Path(p) for p in paths] or [out / "report.json"]
    reports = [MetricReport.load(_require_file(p, "report")) for p in sources]
    markdown = render_leaderboard(reports, "markdown")
    as_json = render_leaderboard(reports, "json")
    out.mkdir(parents=True, exist_ok=True)
    (out / "leaderboard.md").write_text(markdown, encoding="utf-8")
    (out / "leaderboard.json").write_text(as_json, encoding="utf-8")
    sys.stdout.write(markdown if cfg.format == "markdown" else as_json)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = _settings(args)
        command = canonical(args.command)
        if command == "report":
            return cmd_report(cfg, args.reports)
        return {
            "build_vocab": cmd_build_vocab,
            "pretrain": cmd_pretrain,
            "finetune": cmd_finetune,
            "eval": cmd_eval,
            "bench": cmd_bench,
        }[command](cfg)
    except Exception as exc:  # one machine-parsable line, no traceback
        message = str(exc).splitlines()[0] if str(exc) else repr(exc)
        print(f"{ERROR_PREFIX}: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
