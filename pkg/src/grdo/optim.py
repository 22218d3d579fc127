"""AdamW, warm-up + cosine learning rate, early stopping on validation loss."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .autodiff import Parameter

log = logging.getLogger(__name__)


@dataclass
class ScheduleConfig:
    base_lr: float = 1e-4
    warmup_steps: int = 5
    total_steps: int | None = None

    def validate(self) -> "ScheduleConfig":
        if self.base_lr <= 0:
            raise ValueError(f"schedule.base_lr must be positive, got {self.base_lr}")
        if self.warmup_steps < 0:
            raise ValueError(f"schedule.warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.total_steps is not None and self.warmup_steps >= self.total_steps:
            raise ValueError(f"schedule.warmup_steps ({self.warmup_steps}) must be below "
                             f"total_steps ({self.total_steps})")
        return self


def lr_at(step: int, config: ScheduleConfig) -> float:
    """Linear warm-up to ``base_lr`` then half-cosine decay to 0."""
    total, warm, base = config.total_steps, config.warmup_steps, config.base_lr
    if total is None:
        raise ValueError("schedule.total_steps is not set")
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    if step < warm:
        return base * (step + 1) / warm
    return base * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / (total - warm)))


@dataclass
class AdamW:
    params: list[Parameter]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = p.data - lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def adamw_step(params: Iterable[Parameter], state: AdamW, lr: float) -> AdamW:
    """Functional spelling of :meth:`AdamW.step`; ``state`` must own ``params``."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("optimizer state belongs to a different parameter list")
    state.step(lr)
    return state


@dataclass
class EarlyStopping:
    patience: int = 10
    best_val_loss: float = math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    best_snapshot: dict | None = None
    epoch: int = 0

    def update(self, val_loss: float, snapshot=None) -> bool:
        """Record one epoch; return True when training should stop.

        Only a strictly lower loss counts as an improvement.  ``snapshot`` may
        be a zero-argument callable so params are only copied on improvement.
        """
        epoch = self.epoch
        self.epoch += 1
        if math.isnan(val_loss):
            log.warning("validation loss is NaN at epoch %d; counted as no improvement", epoch)
        if not math.isnan(val_loss) and val_loss < self.best_val_loss:
            self.best_val_loss = val_loss
            self.best_epoch = epoch
            self.epochs_since_improvement = 0
            self.best_snapshot = snapshot() if callable(snapshot) else snapshot
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience


def early_stop_update(state: EarlyStopping, val_loss: float, snapshot=None) -> tuple[str, EarlyStopping]:
    return ("stop" if state.update(val_loss, snapshot) else "continue"), state
