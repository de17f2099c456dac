"""Adam with decoupled weight decay, learning-rate schedules and gradient clipping."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class Schedule:
    """Linear warmup from 0 to ``peak_lr`` then linear decay to 0 at ``total_steps``.

    Give either ``warmup_steps`` (pretraining) or ``warmup_fraction``
    (fine-tuning); the fraction is rounded to the nearest step.
    """

    peak_lr: float
    total_steps: int
    warmup_steps: int | None = None
    warmup_fraction: float | None = None

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if (self.warmup_steps is None) == (self.warmup_fraction is None):
            raise ValueError("give exactly one of warmup_steps / warmup_fraction")
        if not 0 <= self.warmup < self.total_steps:
            raise ValueError(f"warmup {self.warmup} must lie in [0, {self.total_steps})")

    @property
    def warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return int(round(self.warmup_fraction * self.total_steps))


def lr_at_step(step: int, schedule: Schedule) -> float:
    if step < 0 or step > schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup
    if step < w:
        return schedule.peak_lr * step / w
    return schedule.peak_lr * (schedule.total_steps - step) / (schedule.total_steps - w)


def layerwise_lrs(base_lr: float, decay: float, num_layers: int) -> dict[str, float]:
    """Rates for groups ``head``, ``layer.N`` ... ``layer.1`` (1 = bottom) and ``embeddings``.

    The head and the top layer get ``base_lr``; layer ``l`` gets
    ``base_lr * decay ** (N - l)`` and the embeddings ``base_lr * decay ** N``.
    """
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"decay must lie in (0, 1], got {decay}")
    rates = {"head": base_lr}
    for layer in range(num_layers, 0, -1):
        rates[f"layer.{layer}"] = base_lr * decay ** (num_layers - layer)
    rates["embeddings"] = base_lr * decay**num_layers
    return rates


_LAYER_RE = re.compile(r"\.layer\.(\d+)\.")


def parameter_group(name: str) -> str:
    """Map a parameter name to its layer-wise decay group."""
    m = _LAYER_RE.search(name)
    if m:
        return f"layer.{int(m.group(1)) + 1}"
    if name.startswith("head."):
        return "head"
    return "embeddings"


def decay_exempt(name: str) -> bool:
    """Biases and layer-norm parameters are not weight-decayed."""
    return name.endswith(("bias", ".gamma", ".beta"))


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    lr: float | Mapping[str, float],
) -> None:
    """One bias-corrected Adam update with decoupled decay ``lr * wd * param``.

    ``lr`` is a scalar or a per-parameter mapping.  Parameters without a
    gradient are skipped.  Any non-finite gradient aborts the step before a
    single value is changed.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}; step {state.step + 1} aborted")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        rate = lr[name] if isinstance(lr, Mapping) else lr
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and not decay_exempt(name):
            update = update + state.weight_decay * p.data
        p.data -= (rate * update).astype(p.dtype)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    # summed in name order so the result does not depend on dict insertion order
    return float(np.sqrt(sum(float(np.sum(np.square(grads[k], dtype=np.float64))) for k in sorted(grads))))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * np.asarray(scale, dtype=grads[name].dtype)
    return norm


def collect_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.grad for name, p in params.items() if p.grad is not None}


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
