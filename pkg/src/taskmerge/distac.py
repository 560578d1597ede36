"""Distillation-based task-vector conditioning.

The student starts at the anchor ``theta_pre + kappa * tau`` and is trained
on unlabeled inputs to match the unscaled teacher ``theta_pre + tau`` under
a temperature pair, with an L2 pull back to the anchor.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import LabeledSplit, UnlabeledSet
from .errors import DomainError, TrainingError
from .linalg import entropy, softmax_temp
from .losses import kd_head, kd_soft_loss  # noqa: F401  (re-exported)
from .merging import TaskVector
from .metrics import accuracy_from_logits
from .model import ModelSpec, ParamVector, backprop, forward_logits, trainable_mask
from .optim import AdamW


@dataclass(frozen=True)
class KDConfig:
    kappa: float = 1.0
    t_tcr: float = 1.0
    t_stu: float = 10.0
    beta: float = 0.5
    steps: int = 500
    learning_rate: float = 2e-4
    batch_size: int = 64
    optimizer: str = "sgd"  # "sgd" (plain gradient step) | "adamw"
    seed: int = 0

    # soft targets only; the hard-label weight is fixed
    zeta: float = 1.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise DomainError("kappa must be positive")
        if not (self.t_tcr > 0 and self.t_stu > 0):
            raise DomainError("temperatures must be positive")
        if self.beta < 0:
            raise DomainError("beta must be >= 0")
        if self.steps < 0 or self.batch_size < 1:
            raise DomainError("steps must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise DomainError("learning rate must be positive")
        if self.optimizer not in ("sgd", "adamw"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")
        if self.zeta != 1.0:
            raise DomainError("only soft-target distillation (zeta = 1) is supported")

    @classmethod
    def norm_mismatch(cls, kappa: float, **kw) -> KDConfig:
        return cls(kappa=kappa, t_tcr=10.0, t_stu=10.0, **kw)

    @classmethod
    def low_confidence(cls, **kw) -> KDConfig:
        return cls(kappa=1.0, t_tcr=1.0, t_stu=10.0, **kw)

    @classmethod
    def combined(cls, kappa: float, **kw) -> KDConfig:
        return cls(kappa=kappa, t_tcr=1.0, t_stu=10.0, **kw)

    def summary(self) -> dict:
        return asdict(self)


def choose_kappa_norm_match(norms) -> tuple[int, float]:
    """Pick the largest task vector and the factor bringing it to the mean
    norm of the others."""
    norms = [float(n) for n in norms]
    if len(norms) < 2:
        raise DomainError("need at least two task vectors")
    if any(n <= 0 for n in norms):
        raise DomainError("task vector norms must be positive")
    idx = int(np.argmax(norms))
    others = norms[:idx] + norms[idx + 1 :]
    return idx, float(np.mean(others)) / norms[idx]


@dataclass
class DistacStep:
    step: int
    loss: float
    rel_accuracy: float
    rel_norm: float
    entropy: float


def write_distac_history(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "rel_accuracy", "rel_norm", "entropy"])
        for r in rows:
            w.writerow([r.step, repr(r.rel_accuracy), repr(r.rel_norm), repr(r.entropy)])


def distac_condition(spec: ModelSpec, theta_pre: ParamVector, tau, unlabeled: UnlabeledSet,
                     cfg: KDConfig, monitor: LabeledSplit | None = None,
                     history: list | None = None, log_every: int = 1) -> ParamVector:
    """Condition one task vector and return the student parameters.

    ``monitor`` (optional, labelled) is only used to log relative accuracy
    and entropy into ``history``; it never influences the update.
    """
    if not isinstance(unlabeled, UnlabeledSet):
        raise DomainError("distillation data must be an UnlabeledSet")
    tau = tau.delta if isinstance(tau, TaskVector) else tau
    theta_pre.check_compatible(tau)
    teacher = theta_pre + tau
    anchor = theta_pre.like(theta_pre.values + cfg.kappa * tau.values)
    if cfg.steps == 0:
        return anchor

    rng = np.random.default_rng(cfg.seed)
    X = unlabeled.x
    teacher_logits_all = forward_logits(spec, teacher, X)
    anchor_norm = float(np.linalg.norm(cfg.kappa * tau.values))
    mask = trainable_mask(spec)
    opt = AdamW(len(theta_pre), mask=mask) if cfg.optimizer == "adamw" else None

    mon_teacher_acc = None
    if monitor is not None and history is not None:
        mon_teacher_acc = accuracy_from_logits(forward_logits(spec, teacher, monitor.x), monitor.y)

    params = anchor.values.copy()
    last_good = params.copy()
    bs = min(cfg.batch_size, len(X))
    smap = theta_pre.shape_map
    for step in range(cfg.steps):
        idx = rng.choice(len(X), size=bs, replace=False)
        head = kd_head(teacher_logits_all[idx], cfg.t_tcr, cfg.t_stu)
        kd, grad = backprop(spec, ParamVector(params, smap), X[idx], head)
        diff = params - anchor.values
        loss = kd + cfg.beta * float(diff @ diff)
        g = np.where(mask, grad.values + 2.0 * cfg.beta * diff, 0.0)
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise TrainingError(
                f"non-finite distillation loss at step {step}", step=step,
                last_good=ParamVector(last_good, smap),
            )
        last_good = params
        if opt is None:
            params = params - cfg.learning_rate * g
        else:
            params = opt.step(params, g, cfg.learning_rate)
        if history is not None and (step % log_every == 0 or step == cfg.steps - 1):
            cur = ParamVector(params, smap)
            rel_norm = float(np.linalg.norm(params - theta_pre.values)) / anchor_norm if anchor_norm else 0.0
            rel_acc = ent = float("nan")
            if monitor is not None:
                logits = forward_logits(spec, cur, monitor.x)
                acc = accuracy_from_logits(logits, monitor.y)
                rel_acc = acc / mon_teacher_acc if mon_teacher_acc else float("nan")
                ent = float(np.mean(entropy(softmax_temp(logits))))
            history.append(DistacStep(step, float(loss), rel_acc, rel_norm, ent))
    return ParamVector(params, smap)
