"""Pretraining loop: batches -> loss -> backward -> clip -> AdamW -> schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import EpochIterator, MaskingPolicy
from .encoder import ModelConfig, Params
from .objectives import init_pretraining_params, pretraining_loss
from .optim import OptimState, Schedule, adamw_step, clip_grad_norm, collect_grads, lr_at_step, zero_grads
from .tensor import Tensor, new_rng, restore_rng, rng_state

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainOptions:
    batch_size: int = 128
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    log_every: int = 100
    checkpoint_every: int = 0
    grad_accum: int = 1
    policy: MaskingPolicy = field(default_factory=MaskingPolicy)


def params_from_tensors(tensors: dict[str, np.ndarray]) -> Params:
    return {name: Tensor(arr.copy(), requires_grad=True) for name, arr in tensors.items()}


class Pretrainer:
    """Owns parameters, optimizer moments, RNG and data position for one run.

    A single seed drives everything: parameter init, epoch shuffles
    (``PCG64([seed, epoch])``) and the step RNG used for masking, dropout
    and generator sampling.  :meth:`checkpoint` captures all of it, so a run
    resumed with :meth:`from_checkpoint` continues bit-identically.
    """

    def __init__(
        self,
        config: ModelConfig,
        sequences,
        schedule: Schedule,
        seed: int,
        options: TrainOptions | None = None,
        meta: dict | None = None,
    ):
        self.config = config
        self.schedule = schedule
        self.seed = seed
        self.options = options or TrainOptions()
        self.meta = dict(meta or {})
        init_rng = new_rng([seed, 0x1A17])
        self.params = init_pretraining_params(config, init_rng)
        self.optim = OptimState(weight_decay=self.options.weight_decay)
        self.rng = new_rng([seed, 0x57E9])
        self.batches = EpochIterator(sequences, self.options.batch_size, seed)
        self.step = 0
        self.history: list[dict] = []

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, sequences, schedule: Schedule, options: TrainOptions | None = None):
        seed = int(ckpt.meta["seed"])
        self = cls(ckpt.config, sequences, schedule, seed, options, ckpt.meta)
        self.params = params_from_tensors(ckpt.tensors)
        if ckpt.optim is not None:
            self.optim = ckpt.optim
        if ckpt.rng_state is not None:
            self.rng = restore_rng(ckpt.rng_state)
        self.step = ckpt.step
        epoch, index = ckpt.meta.get("data_position", [0, 0])
        self.batches.seek(epoch, index)
        return self

    def checkpoint(self, include_optimizer: bool = True) -> Checkpoint:
        meta = dict(self.meta)
        meta["seed"] = self.seed
        meta["data_position"] = list(self.batches.position())
        meta["objective"] = self.config.objective
        optim = None
        if include_optimizer:
            optim = OptimState(
                {k: v.copy() for k, v in self.optim.m.items()},
                {k: v.copy() for k, v in self.optim.v.items()},
                self.optim.step, self.optim.beta1, self.optim.beta2, self.optim.eps, self.optim.weight_decay,
            )
        return Checkpoint(
            self.config,
            {name: p.data.copy() for name, p in self.params.items()},
            self.step,
            optim,
            rng_state(self.rng),
            meta,
        )

    def train_step(self) -> dict:
        opts = self.options
        zero_grads(self.params)
        totals = {"total": 0.0, "mlm": 0.0, "rtd": 0.0, "rtd_accuracy": 0.0}
        for _ in range(opts.grad_accum):
            batch = next(self.batches)
            out = pretraining_loss(self.config, self.params, batch, opts.policy, self.rng, training=True)
            value = float(out.total.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at step {self.step + 1}")
            loss = out.total * (1.0 / opts.grad_accum) if opts.grad_accum > 1 else out.total
            loss.backward()
            totals["total"] += value / opts.grad_accum
            totals["mlm"] += float(out.mlm.data) / opts.grad_accum
            if out.rtd is not None:
                totals["rtd"] += float(out.rtd.data) / opts.grad_accum
                totals["rtd_accuracy"] += out.rtd_accuracy / opts.grad_accum
        grads = collect_grads(self.params)
        norm = clip_grad_norm(grads, opts.clip_norm)
        lr = lr_at_step(self.step + 1, self.schedule)
        adamw_step(self.params, grads, self.optim, lr)
        self.step += 1
        record = {"step": self.step, "lr": lr, "grad_norm": norm, **totals}
        if self.config.objective != "electra":
            del record["rtd"], record["rtd_accuracy"]
        self.history.append(record)
        return record

    def run(
        self,
        steps: int,
        checkpoint_path: str | Path | None = None,
        on_log: Callable[[dict], None] | None = None,
    ) -> list[dict]:
        """Train ``steps`` more steps; on divergence the last saved checkpoint is left in place."""
        opts = self.options
        records = []
        for _ in range(steps):
            record = self.train_step()
            records.append(record)
            if opts.log_every and self.step % opts.log_every == 0:
                log.info("step %d loss %.4f lr %.3g", self.step, record["total"], record["lr"])
                if on_log:
                    on_log(record)
            if checkpoint_path and opts.checkpoint_every and self.step % opts.checkpoint_every == 0:
                save_checkpoint(self.checkpoint(), checkpoint_path)
        if checkpoint_path:
            save_checkpoint(self.checkpoint(), checkpoint_path)
        return records


def pretrain(
    config: ModelConfig,
    sequences,
    schedule: Schedule,
    seed: int,
    steps: int | None = None,
    options: TrainOptions | None = None,
    checkpoint_path=None,
    meta: dict | None = None,
    resume: bool = False,
) -> tuple[Checkpoint, list[dict]]:
    """Pretrain from scratch (or resume from ``checkpoint_path``) and return the final checkpoint and per-step log."""
    if resume and checkpoint_path and Path(checkpoint_path).exists():
        trainer = Pretrainer.from_checkpoint(load_checkpoint(checkpoint_path), sequences, schedule, options)
    else:
        trainer = Pretrainer(config, sequences, schedule, seed, options, meta)
    remaining = (schedule.total_steps if steps is None else steps) - trainer.step
    records = trainer.run(max(0, remaining), checkpoint_path)
    return trainer.checkpoint(), records
