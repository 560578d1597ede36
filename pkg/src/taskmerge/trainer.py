"""Pretraining, fine-tuning and joint multi-task training loops."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import LabeledSplit
from .errors import DomainError, TrainingError
from .linalg import entropy, softmax_temp
from .losses import LossSpec, make_head, one_hot
from .model import ModelSpec, ParamVector, backprop, init_params, trainable_mask
from .optim import SCHEDULES, AdamW, lr_at


@dataclass(frozen=True)
class TrainConfig:
    """Fine-tuning knobs.  Defaults are the desk-scale profile."""

    learning_rate: float = 1.5e-3
    steps: int = 500
    warmup_steps: int = 50
    schedule: str = "cosine"
    weight_decay: float = 0.1
    batch_size: int = 64
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError("learning rate must be positive")
        if self.steps < 0 or self.batch_size < 1:
            raise DomainError("steps must be >= 0 and batch_size >= 1")
        if self.warmup_steps > self.steps:
            raise DomainError("warmup_steps must not exceed steps")
        if self.schedule not in SCHEDULES:
            raise DomainError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def full_scale(cls, **kw) -> TrainConfig:
        base = dict(learning_rate=1e-5, steps=2000, warmup_steps=200, batch_size=128)
        base.update(kw)
        return cls(**base)

    def summary(self) -> dict:
        d = asdict(self)
        d["loss"] = asdict(self.loss)
        return d


@dataclass
class HistoryRow:
    step: int
    loss: float
    train_entropy: float


def write_history_csv(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "train_entropy"])
        for r in rows:
            w.writerow([r.step, repr(float(r.loss)), repr(float(r.train_entropy))])


class _EpochSampler:
    """Shuffle once per epoch with the run seed and hand out index batches."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n == 0:
            raise DomainError("training data is empty")
        self.n = n
        self.bs = min(batch_size, n)
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.bs > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos : self.pos + self.bs]
        self.pos += self.bs
        return idx


def _batch_targets(loss: LossSpec, x: np.ndarray, y: np.ndarray, num_classes: int,
                   rng: np.random.Generator):
    if loss.kind == "mixup":
        lam = float(rng.uniform(0.0, 1.0))
        perm = rng.permutation(len(y))
        xm = lam * x + (1.0 - lam) * x[perm]
        tm = lam * one_hot(y, num_classes) + (1.0 - lam) * one_hot(y[perm], num_classes)
        return xm, tm
    return x, y


def _run(spec: ModelSpec, theta: ParamVector, draw, cfg: TrainConfig, history: list | None):
    """Shared AdamW loop.

    ``draw(rng) -> (x, targets, step_spec)`` yields the next batch; ``step_spec``
    may narrow the output window for that step (multi-task training).
    """
    if cfg.steps == 0:
        return theta
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(len(theta), weight_decay=cfg.weight_decay, mask=trainable_mask(spec))
    params = theta.values.copy()
    smap = theta.shape_map
    for step in range(cfg.steps):
        x, targets, step_spec = draw(rng)
        head = make_head(cfg.loss, targets, step_spec.num_outputs)
        logits_box = []

        def tracked(logits, head=head):
            logits_box.append(logits)
            return head(logits)

        cur = ParamVector(params, smap)
        loss, grad = backprop(step_spec, cur, x, tracked)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad.values)):
            raise TrainingError(
                f"non-finite loss at step {step}", step=step, loss=loss,
                param_norm=float(np.linalg.norm(params)),
            )
        lr = lr_at(step, cfg.learning_rate, cfg.steps, cfg.warmup_steps, cfg.schedule)
        params = opt.step(params, grad.values, lr)
        if history is not None:
            ent = float(np.mean(entropy(softmax_temp(logits_box[0]))))
            history.append(HistoryRow(step, loss, ent))
    return ParamVector(params, smap)


def finetune(spec: ModelSpec, theta_init: ParamVector, data: LabeledSplit, cfg: TrainConfig,
             history: list | None = None) -> ParamVector:
    """Fine-tune from ``theta_init`` on labelled ``data``.

    Deterministic for a given ``cfg.seed``.  Per-step rows (step, loss,
    train entropy) are appended to ``history`` when given.
    """
    if len(data) == 0:
        raise DomainError("training data is empty")
    rng0 = np.random.default_rng(cfg.seed)
    sampler = _EpochSampler(len(data), cfg.batch_size, np.random.default_rng(rng0.integers(2**63)))

    def draw(rng):
        idx = sampler.next()
        return (*_batch_targets(cfg.loss, data.x[idx], data.y[idx], spec.num_outputs, rng), spec)

    return _run(spec, theta_init, draw, cfg, history)


def pretrain(spec: ModelSpec, x: np.ndarray, soft_targets: np.ndarray, cfg: TrainConfig,
             history: list | None = None) -> ParamVector:
    """Train from a seeded He-uniform init on soft (coarse) targets."""
    theta0 = init_params(spec, np.random.default_rng(cfg.seed))
    rng0 = np.random.default_rng(cfg.seed + 1)
    sampler = _EpochSampler(len(x), cfg.batch_size, rng0)
    cfg = replace(cfg, loss=LossSpec())

    def draw(rng):
        idx = sampler.next()
        return x[idx], soft_targets[idx], spec

    return _run(spec, theta0, draw, cfg, history)


def train_mtl(spec, theta_pre: ParamVector, all_task_data: list[LabeledSplit],
              cfg: TrainConfig, history: list | None = None) -> ParamVector:
    """Joint training on the union of tasks, one task per step in round-robin order.

    ``spec`` is either one ModelSpec shared by all tasks or a list with one
    (output-windowed) spec per task.
    """
    if len(all_task_data) < 1:
        raise DomainError("need at least one task")
    specs = list(spec) if isinstance(spec, (list, tuple)) else [spec] * len(all_task_data)
    if len(specs) != len(all_task_data):
        raise DomainError("need one model spec per task")
    if len(all_task_data) == 1:
        return finetune(specs[0], theta_pre, all_task_data[0], cfg, history)
    rng0 = np.random.default_rng(cfg.seed)
    samplers = [
        _EpochSampler(len(d), cfg.batch_size, np.random.default_rng(rng0.integers(2**63)))
        for d in all_task_data
    ]
    counter = [0]

    def draw(rng):
        t = counter[0] % len(all_task_data)
        counter[0] += 1
        d = all_task_data[t]
        idx = samplers[t].next()
        return (*_batch_targets(cfg.loss, d.x[idx], d.y[idx], specs[t].num_outputs, rng), specs[t])

    return _run(specs[0], theta_pre, draw, cfg, history)
