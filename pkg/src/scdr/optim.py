from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from .errors import ConfigError, GraphStateError
from .tensor import Tensor


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to ``base_lr`` then step decay by ``decay_ratio``."""

    base_lr: float = 0.01
    warmup_epochs: int = 10
    decay_every: int = 25
    decay_ratio: float = 0.5

    def __post_init__(self):
        if self.base_lr < 0 or self.warmup_epochs < 0 or self.decay_every < 1:
            raise ConfigError(f"invalid learning-rate schedule {self}")
        if not 0 < self.decay_ratio <= 1:
            raise ConfigError(f"decay_ratio must lie in (0, 1], got {self.decay_ratio}")

    def lr(self, epoch: int) -> float:
        if epoch < self.warmup_epochs:
            return self.base_lr * (epoch + 1) / self.warmup_epochs
        steps = (epoch - self.warmup_epochs) // self.decay_every
        return self.base_lr * math.pow(self.decay_ratio, steps)


def sgd_step(params: Iterable[Tensor], epoch: int, schedule: LrSchedule) -> float:
    """``p <- p - lr(epoch) * grad(p)`` for every parameter, then clear grads.

    Returns the learning rate that was applied.
    """
    params = list(params)
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise GraphStateError(f"parameters {missing} have no gradient; run backward() first")
    lr = schedule.lr(epoch)
    for p in params:
        p.data -= (lr * p.grad).astype(p.data.dtype)
        p.grad = None
    return lr
