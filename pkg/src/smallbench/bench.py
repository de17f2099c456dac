"""Benchmark orchestration (best-of-N fine-tuning over 8 tasks) and leaderboard rendering.

Scores in reports and leaderboards are percentages (metric x 100), the
convention of published GLUE tables.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .glue import TASK_ORDER, TASKS, FinetuneHyper

log = logging.getLogger(__name__)

REPORT_SCHEMA = "smallbench.report"
REPORT_VERSION = 1
LEADERBOARD_VERSION = 1
LEADERBOARD_COLUMNS = ("Model", "Params") + TASK_ORDER + ("AVG",)


class BenchmarkError(RuntimeError):
    pass


def average_score(scores: Sequence[float]) -> float:
    """Arithmetic mean of exactly eight task scores (unrounded; render to 2 decimals)."""
    scores = list(scores)
    if len(scores) != len(TASK_ORDER):
        raise ValueError(f"average needs exactly {len(TASK_ORDER)} task scores, got {len(scores)}")
    return math.fsum(scores) / len(scores)


@dataclass
class RunRecord:
    score: float
    seed: int
    hyper: dict


@dataclass
class TaskResult:
    metric: str
    runs: list[RunRecord] = field(default_factory=list)

    @property
    def best_run(self) -> RunRecord | None:
        return max(self.runs, key=lambda r: r.score) if self.runs else None

    @property
    def best(self) -> float | None:
        run = self.best_run
        return run.score if run else None


@dataclass
class MetricReport:
    model: str
    params: int
    tasks: dict[str, TaskResult] = field(default_factory=dict)
    complete: bool = True
    metadata: dict = field(default_factory=dict)

    @property
    def average(self) -> float | None:
        if not self.complete or any(t not in self.tasks or self.tasks[t].best is None for t in TASK_ORDER):
            return None
        return average_score([self.tasks[t].best for t in TASK_ORDER])

    def best_scores(self) -> dict[str, float]:
        return {t: self.tasks[t].best for t in TASK_ORDER if t in self.tasks and self.tasks[t].best is not None}

    def to_json(self) -> str:
        tasks = {}
        for name, res in self.tasks.items():
            best = res.best_run
            tasks[name] = {
                "metric": res.metric,
                "runs": [asdict(r) for r in res.runs],
                "best": res.best,
                "best_hyper": best.hyper if best else None,
            }
        doc = {
            "schema": REPORT_SCHEMA,
            "schema_version": REPORT_VERSION,
            "model": self.model,
            "params": self.params,
            "complete": self.complete,
            "tasks": tasks,
            "average": self.average,
            "metadata": self.metadata,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> MetricReport:
        doc = json.loads(text)
        if doc.get("schema") != REPORT_SCHEMA:
            raise ValueError("not a smallbench report")
        if doc.get("schema_version") != REPORT_VERSION:
            raise ValueError(f"unsupported report schema version {doc.get('schema_version')}")
        tasks = {
            name: TaskResult(t["metric"], [RunRecord(**r) for r in t["runs"]]) for name, t in doc["tasks"].items()
        }
        return cls(doc["model"], int(doc["params"]), tasks, bool(doc["complete"]), doc.get("metadata", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> MetricReport:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def report_from_scores(model: str, params: int, scores: dict[str, float], metadata: dict | None = None) -> MetricReport:
    """A single-run report, e.g. for scores published elsewhere."""
    tasks = {t: TaskResult(TASKS[t].metric, [RunRecord(float(scores[t]), 0, {})]) for t in TASK_ORDER}
    return MetricReport(model, params, tasks, True, dict(metadata or {}))


# -- orchestration ---------------------------------------------------------


@dataclass
class BenchPlan:
    model: str
    params: int
    runs_per_task: int
    seed: int
    lrs: Sequence[float]
    layer_decays: Sequence[float]
    batch_sizes: Sequence[int]
    epochs: Sequence[int]
    tasks: Sequence[str] = TASK_ORDER
    jobs: int = 1
    metadata: dict = field(default_factory=dict)

    def grid(self) -> list[dict]:
        return [
            {"lr": lr, "layer_decay": d, "batch": b, "epochs": e}
            for lr, d, b, e in itertools.product(self.lrs, self.layer_decays, self.batch_sizes, self.epochs)
        ]

    def hyper_for(self, task_index: int, run: int) -> FinetuneHyper:
        combos = self.grid()
        seed = derive_seed(self.seed, task_index, run)
        return FinetuneHyper(seed=seed, **combos[run % len(combos)])


def derive_seed(root: int, task_index: int, run: int) -> int:
    return int(np.random.SeedSequence([root, task_index, run]).generate_state(1)[0])


Runner = Callable[[str, FinetuneHyper], float]


def run_benchmark(plan: BenchPlan, runner: Runner, report_path=None) -> MetricReport:
    """Run ``runs_per_task`` fine-tunings per task and keep every score.

    ``runner(task, hyper)`` returns the dev metric in natural units; reports
    store it x100.  If a task fails, the partial report is saved with
    ``complete = false`` and :class:`BenchmarkError` is raised.
    """
    if plan.runs_per_task < 1:
        raise ValueError("runs_per_task must be >= 1")
    report = MetricReport(plan.model, plan.params, {}, True, dict(plan.metadata))
    jobs = [(t, r) for t in range(len(plan.tasks)) for r in range(plan.runs_per_task)]

    def record(t: int, r: int, value: float) -> None:
        name = plan.tasks[t]
        hyper = plan.hyper_for(t, r)
        res = report.tasks.setdefault(name, TaskResult(TASKS[name].metric))
        res.runs.append(RunRecord(100.0 * float(value), hyper.seed, _hyper_dict(hyper)))

    try:
        if plan.jobs > 1:
            with ProcessPoolExecutor(max_workers=plan.jobs) as pool:
                futures = [pool.submit(runner, plan.tasks[t], plan.hyper_for(t, r)) for t, r in jobs]
                for (t, r), fut in zip(jobs, futures):
                    try:
                        record(t, r, fut.result())
                    except Exception as exc:
                        raise _TaskFailure(plan.tasks[t], exc) from exc
        else:
            for t, r in jobs:
                try:
                    value = runner(plan.tasks[t], plan.hyper_for(t, r))
                except Exception as exc:
                    raise _TaskFailure(plan.tasks[t], exc) from exc
                record(t, r, value)
                log.info("%s run %d: %.2f", plan.tasks[t], r, 100.0 * value)
    except _TaskFailure as failure:
        report.complete = False
        report.metadata["failed_task"] = failure.task
        report.metadata["error"] = str(failure.cause)
        if report_path:
            report.save(report_path)
        raise BenchmarkError(f"task {failure.task} failed: {failure.cause}; partial report marked incomplete") from failure.cause
    if report_path:
        report.save(report_path)
    return report


class _TaskFailure(Exception):
    def __init__(self, task: str, cause: Exception):
        super().__init__(task)
        self.task = task
        self.cause = cause


def _hyper_dict(h: FinetuneHyper) -> dict:
    return {"lr": h.lr, "batch": h.batch, "epochs": h.epochs, "layer_decay": h.layer_decay}


# -- leaderboard -----------------------------------------------------------


def leaderboard_rows(reports: Sequence[MetricReport]) -> list[dict]:
    """Rows sorted by AVG descending; ties keep lexicographic label order."""
    if not reports:
        raise ValueError("need at least one report")
    rows = []
    for rep in reports:
        avg = rep.average
        if avg is None:
            raise ValueError(f"report for {rep.model} is incomplete")
        best = rep.best_scores()
        row = {"model": rep.model, "params": int(rep.params)}
        row.update({t: round(best[t], 2) for t in TASK_ORDER})
        row["AVG"] = round(avg, 2)
        rows.append(row)
    rows.sort(key=lambda r: r["model"])
    rows.sort(key=lambda r: -r["AVG"])
    return rows


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def render_leaderboard(reports: Sequence[MetricReport], fmt: str = "markdown") -> str:
    rows = leaderboard_rows(reports)
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    if fmt != "markdown":
        raise ValueError(f"unknown leaderboard format {fmt!r}")
    lines = [
        f"<!-- smallbench leaderboard v{LEADERBOARD_VERSION} -->",
        "| " + " | ".join(LEADERBOARD_COLUMNS) + " |",
        "|" + "|".join(["---"] + ["---:"] * (len(LEADERBOARD_COLUMNS) - 1)) + "|",
    ]
    for row in rows:
        cells = [row["model"], f"{row['params']:,}"] + [_fmt(row[t]) for t in TASK_ORDER] + [_fmt(row["AVG"])]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def parse_leaderboard(text: str, fmt: str = "markdown") -> list[dict]:
    """Inverse of :func:`render_leaderboard`."""
    if fmt == "json":
        rows = json.loads(text)
        validate_leaderboard(rows)
        return rows
    rows = []
    table = [ln for ln in text.splitlines() if ln.startswith("|")]
    header = [c.strip() for c in table[0].strip("|").split("|")]
    if tuple(header) != LEADERBOARD_COLUMNS:
        raise ValueError(f"unexpected leaderboard columns {header}")
    for line in table[2:]:
        cells = [c.strip() for c in line.strip("|").split("|")]
        row = {"model": cells[0], "params": int(cells[1].replace(",", ""))}
        for name, cell in zip(TASK_ORDER + ("AVG",), cells[2:]):
            row[name] = float(cell)
        rows.append(row)
    validate_leaderboard(rows)
    return rows


def validate_leaderboard(rows) -> None:
    """Check the JSON leaderboard schema and the AVG/row-order invariants."""
    if not isinstance(rows, list) or not rows:
        raise ValueError("leaderboard must be a non-empty array")
    expected = {"model", "params", "AVG", *TASK_ORDER}
    for row in rows:
        if not isinstance(row, dict) or set(row) != expected:
            raise ValueError(f"leaderboard row has keys {sorted(row) if isinstance(row, dict) else row}")
        if not isinstance(row["model"], str) or not isinstance(row["params"], int):
            raise ValueError("model must be a string and params an integer")
        for key in TASK_ORDER + ("AVG",):
            if not isinstance(row[key], (int, float)) or isinstance(row[key], bool):
                raise ValueError(f"{key} must be numeric")
        if abs(average_score([row[t] for t in TASK_ORDER]) - row["AVG"]) > 0.01 + 1e-9:
            raise ValueError(f"row {row['model']}: AVG {row['AVG']} inconsistent with its task scores")
    avgs = [r["AVG"] for r in rows]
    if avgs != sorted(avgs, reverse=True):
        raise ValueError("rows are not sorted by AVG descending")
