"""Classification losses and their logit gradients.

Every ``*_head`` function maps a logits batch ``(N, C)`` to
``(mean loss, dL/dlogits)`` and is what :func:`grad_loss` backpropagates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .linalg import PROB_FLOOR, log_softmax_temp, softmax_temp
from .model import ModelSpec, ParamVector, backprop

LOSS_KINDS = ("cross_entropy", "label_smoothing", "mixup", "focal", "kd")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "cross_entropy"
    alpha: float = 0.0
    gamma: float = 0.0
    t_tcr: float = 1.0
    t_stu: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise DomainError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError(f"smoothing alpha must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise DomainError(f"focal gamma must be >= 0, got {self.gamma}")
        if not (self.t_tcr > 0 and self.t_stu > 0):
            raise DomainError("distillation temperatures must be positive")

    @classmethod
    def label_smoothing(cls, alpha: float = 0.1) -> LossSpec:
        return cls("label_smoothing", alpha=alpha)

    @classmethod
    def focal(cls, gamma: float = 10.0) -> LossSpec:
        return cls("focal", gamma=gamma)

    @classmethod
    def mixup(cls) -> LossSpec:
        return cls("mixup")

    @classmethod
    def kd(cls, t_tcr: float, t_stu: float) -> LossSpec:
        return cls("kd", t_tcr=t_tcr, t_stu=t_stu)

    @property
    def smoothing(self) -> float:
        return self.alpha if self.kind == "label_smoothing" else 0.0


def _check_labels(y: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise DomainError("class labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise DomainError(f"class index out of range [0, {num_classes})")
    return y


def one_hot(y, num_classes: int) -> np.ndarray:
    y = _check_labels(np.atleast_1d(y), num_classes)
    out = np.zeros((y.size, num_classes))
    out[np.arange(y.size), y] = 1.0
    return out


def smoothed_targets(y, num_classes: int, alpha: float) -> np.ndarray:
    return (1.0 - alpha) * one_hot(y, num_classes) + alpha / num_classes


def ce_loss(logits, target, alpha: float = 0.0):
    """Label-smoothed cross-entropy; per-sample values for a batch."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    q = smoothed_targets(target, Z.shape[1], alpha)
    vals = -(q * log_softmax_temp(Z)).sum(axis=1)
    return float(vals[0]) if single else vals


def focal_loss(logits, target, gamma: float):
    """``-(1 - p_t)^gamma * log p_t``; per-sample values for a batch."""
    if gamma < 0:
        raise DomainError(f"gamma must be >= 0, got {gamma}")
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    y = _check_labels(np.atleast_1d(target), Z.shape[1])
    logp = log_softmax_temp(Z)[np.arange(len(y)), y]
    pt = np.exp(logp)
    vals = -((1.0 - pt) ** gamma) * logp
    return float(vals[0]) if single else vals


def kd_soft_loss(z_tcr, z_stu, T_tcr: float, T_stu: float):
    """``T_tcr * T_stu * KL(softmax(z_tcr/T_tcr) || softmax(z_stu/T_stu))``."""
    z_tcr = np.asarray(z_tcr, dtype=np.float64)
    z_stu = np.asarray(z_stu, dtype=np.float64)
    if z_tcr.shape != z_stu.shape:
        raise DomainError(f"logit shapes differ: {z_tcr.shape} vs {z_stu.shape}")
    p = softmax_temp(z_tcr, T_tcr)
    logp = np.log(np.maximum(p, PROB_FLOOR))
    logq = log_softmax_temp(z_stu, T_stu)
    kl = np.maximum(np.where(p > 0, p * (logp - logq), 0.0).sum(axis=-1), 0.0)
    vals = T_tcr * T_stu * kl
    return float(vals) if vals.ndim == 0 else vals


def mixup_pair(x1, y1, x2, y2, lam: float | None = None, num_classes: int | None = None,
               rng: np.random.Generator | None = None):
    """Convex combination of two labelled samples (or aligned batches)."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise DomainError(f"input shapes differ: {x1.shape} vs {x2.shape}")
    if lam is None:
        lam = float((rng or np.random.default_rng()).uniform(0.0, 1.0))
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"mixing weight must lie in [0, 1], got {lam}")
    if num_classes is None:
        num_classes = int(max(np.max(y1), np.max(y2))) + 1
    t1 = one_hot(y1, num_classes)
    t2 = one_hot(y2, num_classes)
    if t1.shape != t2.shape:
        raise DomainError("label batches differ in length")
    x = lam * x1 + (1.0 - lam) * x2
    t = lam * t1 + (1.0 - lam) * t2
    if np.ndim(y1) == 0:
        t = t[0]
    return x, t


# ---- loss heads: logits -> (mean loss, dL/dlogits) -------------------------

def soft_ce_head(targets: np.ndarray):
    targets = np.asarray(targets, dtype=np.float64)

    def head(logits):
        n = logits.shape[0]
        logp = log_softmax_temp(logits)
        loss = -(targets * logp).sum() / n
        return loss, (np.exp(logp) - targets) / n

    return head


def focal_head(y: np.ndarray, gamma: float):
    def head(logits):
        n, c = logits.shape
        yy = _check_labels(y, c)
        logp = log_softmax_temp(logits)
        p = np.exp(logp)
        idx = np.arange(n)
        lpt = logp[idx, yy]
        pt = p[idx, yy]
        one_m = 1.0 - pt
        loss = -(one_m ** gamma * lpt).sum() / n
        if gamma == 0:
            coeff = -np.ones(n)
        else:
            # d/dz_j of -(1-p_t)^g log p_t = (onehot_j - p_j) * coeff
            coeff = gamma * one_m ** (gamma - 1.0) * pt * lpt - one_m ** gamma
            coeff = np.where(one_m > 0, coeff, -one_m ** gamma)
        onehot = np.zeros_like(p)
        onehot[idx, yy] = 1.0
        grad = (onehot - p) * coeff[:, None] / n
        return loss, grad

    return head


def kd_head(teacher_logits: np.ndarray, T_tcr: float, T_stu: float):
    p = softmax_temp(teacher_logits, T_tcr)
    plogp = np.where(p > 0, p * np.log(np.maximum(p, PROB_FLOOR)), 0.0).sum(axis=1)

    def head(logits):
        n = logits.shape[0]
        logq = log_softmax_temp(logits, T_stu)
        kl = plogp - (p * logq).sum(axis=1)
        loss = T_tcr * T_stu * kl.sum() / n
        grad = T_tcr * (np.exp(logq) - p) / n
        return loss, grad

    return head


def make_head(loss: LossSpec, targets, num_classes: int):
    """Build the loss head for ``targets`` (labels, soft targets or teacher logits)."""
    targets = np.asarray(targets)
    if loss.kind == "kd":
        return kd_head(targets, loss.t_tcr, loss.t_stu)
    if loss.kind == "focal":
        return focal_head(targets, loss.gamma)
    if targets.ndim == 2:
        return soft_ce_head(targets)
    return soft_ce_head(smoothed_targets(targets, num_classes, loss.smoothing))


def loss_and_grad(spec: ModelSpec, theta: ParamVector, batch, loss: LossSpec):
    """Mean batch loss and its exact gradient with respect to ``theta``.

    ``batch`` is ``(x, targets)``: integer labels, an ``(N, C)`` soft target
    matrix, or teacher logits when ``loss.kind == "kd"``.
    """
    X, targets = batch
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
        targets = np.asarray(targets)[None, ...]
    if X.shape[0] == 0:
        raise DomainError("empty batch")
    head = make_head(loss, targets, spec.num_outputs)
    return backprop(spec, theta, X, head)


def grad_loss(spec: ModelSpec, theta: ParamVector, batch, loss: LossSpec) -> ParamVector:
    return loss_and_grad(spec, theta, batch, loss)[1]


def batch_loss(spec: ModelSpec, theta: ParamVector, batch, loss: LossSpec) -> float:
    from .model import forward_logits

    X, targets = batch
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
        targets = np.asarray(targets)[None, ...]
    head = make_head(loss, targets, spec.num_outputs)
    return float(head(forward_logits(spec, theta, X))[0])
