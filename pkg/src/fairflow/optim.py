"""AdamW-style optimizer with bias-corrected moments and a linear LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class OptimizerError(Exception):
    pass


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr < 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise OptimizerError("invalid AdamW hyperparameters")
        if self.eps < 0 or self.weight_decay < 0:
            raise OptimizerError("eps and weight_decay must be non-negative")


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, Tensor],
    state: AdamWState,
    config: AdamWConfig,
    lr: float | None = None,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Reads ``p.grad`` for every param (missing grad means zero). ``lr``
    overrides ``config.lr`` so a schedule can drive the step size. Raises
    ``OptimizerError`` before touching any param if a gradient is not finite.
    """
    step_lr = config.lr if lr is None else float(lr)
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise OptimizerError(f"non-finite gradient for parameter '{name}'")
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        if config.weight_decay:
            update = update + config.weight_decay * p.data
        p.data -= (step_lr * update).astype(p.data.dtype, copy=False)


class LinearDecay:
    """LR that falls linearly from ``peak`` at step 0 to 0 at ``total_steps``."""

    def __init__(self, peak: float, total_steps: int):
        if total_steps < 1:
            raise OptimizerError("total_steps must be >= 1")
        self.peak = float(peak)
        self.total_steps = int(total_steps)

    def lr(self, step: int) -> float:
        frac = 1.0 - min(max(step, 0), self.total_steps) / self.total_steps
        return self.peak * frac


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
