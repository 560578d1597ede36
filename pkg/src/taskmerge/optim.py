"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError

SCHEDULES = ("constant", "cosine")


def lr_at(step: int, base_lr: float, total_steps: int, warmup_steps: int = 0,
          schedule: str = "cosine") -> float:
    """Learning rate for 0-based ``step``.

    Linear warmup over ``warmup_steps`` then either constant or cosine decay
    to zero at ``total_steps``.
    """
    if schedule not in SCHEDULES:
        raise DomainError(f"unknown schedule {schedule!r}")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if schedule == "constant":
        return base_lr
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, size: int, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, mask: np.ndarray | None = None):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        # coordinates with mask False are never touched (frozen parameters)
        self.mask = None if mask is None or np.all(mask) else np.asarray(mask, dtype=bool)
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        """Return updated parameters; ``params`` is not modified."""
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad * grad
        mhat = self.m / (1.0 - self.b1 ** self.t)
        vhat = self.v / (1.0 - self.b2 ** self.t)
        out = params * (1.0 - lr * self.weight_decay)
        out = out - lr * mhat / (np.sqrt(vhat) + self.eps)
        if self.mask is not None:
            out = np.where(self.mask, out, params)
        return out
