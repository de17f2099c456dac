"""Run configuration: ``key = value`` files, CLI overrides and the toy preset.

Precedence, lowest first: built-in defaults, the toy preset (when
``toy = true``), the config file, command-line flags.  Keys may be written
with ``-`` or ``_``.  Lists are comma-separated.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .encoder import ModelConfig
from .toydata import TOY_CORPUS, TOY_GLUE

VARIANTS: dict[str, tuple[str, str]] = {
    "bert": ("mlm", "absolute"),
    "deberta": ("mlm", "disentangled"),
    "electra": ("electra", "absolute"),
    "electra-deberta": ("electra", "disentangled"),
}
VARIANT_LABELS = {"bert": "BERT", "deberta": "DeBERTa", "electra": "ELECTRA", "electra-deberta": "ELECTRA-DeBERTa"}


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(item: Callable) -> Callable[[str], list]:
    def parse(text: str) -> list:
        values = [item(part.strip()) for part in text.split(",") if part.strip()]
        if not values:
            raise ValueError("empty list")
        return values

    parse.__name__ = f"list[{item.__name__}]"
    return parse


def _variant(text: str) -> str:
    if text not in VARIANTS:
        raise ValueError(f"expected one of {sorted(VARIANTS)}")
    return text


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {list(options)}")
        return text

    parse.__name__ = "|".join(options)
    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str


KEYS: dict[str, Key] = {
    # paths and orchestration
    "model": Key(_variant, "electra-deberta", "model variant: bert | deberta | electra | electra-deberta"),
    "label": Key(str, None, "model label in reports (default: variant display name)"),
    "corpus": Key(str, None, "pretraining corpus (UTF-8, sentence per line, blank line between documents)"),
    "vocab": Key(str, None, "vocab.txt to use; built from the corpus into out_dir when absent"),
    "glue_dir": Key(str, None, "GLUE root holding <TASK>/train.tsv and dev.tsv (fallback: $SMALLBENCH_DATA_DIR)"),
    "columns_file": Key(str, None, "optional TASK.field = value overrides of GLUE column mappings"),
    "checkpoint": Key(str, None, "checkpoint to fine-tune / benchmark / evaluate"),
    "out_dir": Key(str, "runs", "directory for vocab, checkpoints, logs and reports"),
    "task": Key(str, None, "GLUE task for finetune/eval: CoLA SST MRPC STS QQP MNLI QNLI RTE"),
    "seed": Key(int, 0, "root random seed"),
    "jobs": Key(int, 1, "parallel fine-tuning processes in bench"),
    "toy": Key(_bool, False, "apply the toy-scale preset"),
    "resume": Key(_bool, False, "continue pretraining from the checkpoint (default out_dir/pretrain.ckpt) if present"),
    "format": Key(_choice("markdown", "json"), "markdown", "leaderboard format printed by report"),
    # vocabulary and data
    "vocab_size": Key(int, 30522, "target vocabulary size"),
    "min_frequency": Key(int, 2, "minimum pair frequency for vocabulary merges"),
    "mode": Key(_choice("pair", "contiguous"), None, "input construction (default: contiguous for deberta, else pair)"),
    "max_len": Key(int, 128, "maximum sequence length"),
    "batch_size": Key(int, 128, "pretraining batch size"),
    "mask_prob": Key(float, 0.15, "fraction of eligible tokens selected for MLM"),
    # architecture
    "num_layers": Key(int, 12, "transformer layers"),
    "hidden": Key(int, 256, "hidden size"),
    "heads": Key(int, 4, "attention heads"),
    "ffn_inner": Key(int, 1024, "feed-forward inner size"),
    "embedding_dim": Key(int, 128, "factorised embedding width"),
    "max_relative_distance": Key(int, 128, "relative-position window k (table has 2k rows)"),
    "dropout": Key(float, 0.1, "dropout rate"),
    "generator_fraction": Key(float, 0.25, "generator width relative to the discriminator"),
    "lambda_rtd": Key(float, 50.0, "weight of the replaced-token-detection loss"),
    # pretraining optimisation
    "steps": Key(int, None, "pretraining steps (default 1000000 for ELECTRA objectives, 1450000 for MLM)"),
    "stop_after": Key(int, None, "end this invocation at this global step; the schedule still spans all steps"),
    "peak_lr": Key(float, 5e-4, "peak pretraining learning rate"),
    "warmup_steps": Key(int, 10000, "warmup steps (capped at 10% of total steps)"),
    "weight_decay": Key(float, 0.01, "decoupled weight decay"),
    "clip_norm": Key(float, 1.0, "global gradient-norm clip"),
    "grad_accum": Key(int, 1, "gradient accumulation factor"),
    "log_every": Key(int, 100, "log every K steps"),
    "checkpoint_every": Key(int, 10000, "checkpoint every C steps (0 = only at the end)"),
    # fine-tuning / benchmark
    "runs_per_task": Key(int, 5, "fine-tuning runs per task in bench (best is reported)"),
    "finetune_lrs": Key(_list(float), None, "fine-tuning learning rates (default depends on objective)"),
    "layer_decays": Key(_list(float), None, "layer-wise LR decays (default 0.9,0.8,0.7 for ELECTRA, 1.0 for MLM)"),
    "finetune_batch_sizes": Key(_list(int), [16, 32], "fine-tuning batch sizes"),
    "finetune_epochs": Key(_list(int), [3, 10], "fine-tuning epoch counts"),
}

TOY_PRESET: dict[str, Any] = {
    "corpus": str(TOY_CORPUS),
    "glue_dir": str(TOY_GLUE),
    "vocab_size": 2000,
    "min_frequency": 1,
    "max_len": 64,
    "batch_size": 16,
    "num_layers": 2,
    "hidden": 64,
    "heads": 2,
    "ffn_inner": 256,
    "embedding_dim": 64,
    "max_relative_distance": 32,
    "steps": 2000,
    "peak_lr": 1e-3,
    "warmup_steps": 200,
    "log_every": 50,
    "checkpoint_every": 500,
    "runs_per_task": 1,
    "finetune_lrs": [3e-3],
    "layer_decays": [0.8],
    "finetune_batch_sizes": [4],
    "finetune_epochs": [10],
}

ELECTRA_LRS = [1e-4, 2e-4, 3e-4]
ELECTRA_DECAYS = [0.9, 0.8, 0.7]
MLM_LRS = [1e-5, 2e-5, 3e-5, 4e-5, 5e-5]


def canonical(key: str) -> str:
    return key.strip().replace("-", "_")


class RunConfig:
    """Validated key/value settings with attribute access (``cfg.peak_lr``)."""

    def __init__(self, values: dict[str, Any], sources: dict[str, str] | None = None):
        self._values = values
        self.sources = sources or {}

    def __getattr__(self, name: str) -> Any:
        try:
            return self._values[name]
        except KeyError:
            raise AttributeError(name) from None

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    @property
    def objective(self) -> str:
        return VARIANTS[self.model][0]

    @property
    def attention_kind(self) -> str:
        return VARIANTS[self.model][1]

    @property
    def input_mode(self) -> str:
        if self.mode:
            return self.mode
        return "contiguous" if self.model == "deberta" else "pair"

    @property
    def model_label(self) -> str:
        return self.label or VARIANT_LABELS[self.model]

    @property
    def total_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        return 1_000_000 if self.objective == "electra" else 1_450_000

    @property
    def warmup(self) -> int:
        return min(self.warmup_steps, self.total_steps // 10)

    @property
    def lrs(self) -> list[float]:
        if self.finetune_lrs:
            return self.finetune_lrs
        return ELECTRA_LRS if self.objective == "electra" else MLM_LRS

    @property
    def decays(self) -> list[float]:
        if self.layer_decays:
            return self.layer_decays
        return ELECTRA_DECAYS if self.objective == "electra" else [1.0]

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            num_layers=self.num_layers,
            hidden=self.hidden,
            heads=self.heads,
            ffn_inner=self.ffn_inner,
            embedding_dim=self.embedding_dim,
            vocab_size=vocab_size,
            max_len=self.max_len,
            max_relative_distance=self.max_relative_distance,
            attention_kind=self.attention_kind,
            dropout=self.dropout,
            generator_fraction=self.generator_fraction,
            lambda_rtd=self.lambda_rtd,
            objective=self.objective,
        )

    def require(self, *keys: str) -> None:
        for key in keys:
            if self._values.get(key) in (None, ""):
                raise ConfigError(f"missing required setting {key.replace('_', '-')}")


def _parse_value(key: str, raw: Any, where: str) -> Any:
    if not isinstance(raw, str):
        return raw
    try:
        return KEYS[key].parse(raw.strip())
    except ValueError as exc:
        kind = getattr(KEYS[key].parse, "__name__", "value")
        raise ConfigError(f"{where}: bad value {raw!r} for {key} (expected {kind}): {exc}") from None


def read_config_file(path) -> dict[str, Any]:
    values: dict[str, Any] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        where = f"{path}:{lineno}"
        if not sep:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key = canonical(key)
        if key not in KEYS:
            raise ConfigError(f"{where}: unknown key {key.replace('_', '-')!r}")
        values[key] = _parse_value(key, value, where)
    return values


def parse_config(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    file_values = read_config_file(path) if path else {}
    cli_values = {}
    for key, value in (overrides or {}).items():
        key = canonical(key)
        if key not in KEYS:
            raise ConfigError(f"unknown setting {key.replace('_', '-')!r}")
        if value is not None:
            cli_values[key] = _parse_value(key, value, f"--{key.replace('_', '-')}")

    values = {k: spec.default for k, spec in KEYS.items()}
    sources = {k: "default" for k in KEYS}
    toy = cli_values.get("toy", file_values.get("toy", False))
    if toy:
        values.update(TOY_PRESET)
        sources.update({k: "toy" for k in TOY_PRESET})
    for layer, name in ((file_values, "file"), (cli_values, "cli")):
        values.update(layer)
        sources.update({k: name for k in layer})
    for key in ("vocab_size", "max_len", "batch_size", "num_layers", "hidden", "heads", "ffn_inner",
                "embedding_dim", "max_relative_distance", "runs_per_task", "jobs", "grad_accum"):
        if values[key] < 1:
            raise ConfigError(f"{key.replace('_', '-')} must be >= 1 (from {sources[key]})")
    for key in ("steps", "stop_after"):
        if values[key] is not None and values[key] < 0:
            raise ConfigError(f"{key.replace('_', '-')} must be >= 0")
    return RunConfig(values, sources)


def describe_keys() -> str:
    width = max(len(k) for k in KEYS) + 2
    return "\n".join(f"  {k.replace('_', '-'):<{width}}{spec.doc}" for k, spec in KEYS.items())
