"""Accuracy, normalized accuracy, entropy, reliability/ECE and temperature scaling."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledSplit
from .errors import DomainError
from .linalg import entropy, log_softmax_temp, softmax_temp
from .model import ModelSpec, ParamVector, forward_logits

KAPPA_GRID = tuple(round(0.1 * i, 10) for i in range(31))


def accuracy_from_logits(logits: np.ndarray, y: np.ndarray) -> float:
    # np.argmax returns the lowest index on ties
    return float(np.mean(np.argmax(logits, axis=1) == y))


def accuracy(spec: ModelSpec, theta: ParamVector, data: LabeledSplit) -> float:
    if len(data) == 0:
        raise DomainError("cannot score an empty dataset")
    return accuracy_from_logits(forward_logits(spec, theta, data.x), data.y)


def normalized_accuracy(merged_acc: float, individual_acc: float) -> float:
    if individual_acc <= 0:
        raise DomainError("individual accuracy must be positive")
    return merged_acc / individual_acc


def predictive_entropy(spec: ModelSpec, theta: ParamVector, x) -> float:
    """Mean entropy of the temperature-1 predictive distribution."""
    x = x.x if isinstance(x, LabeledSplit) else np.asarray(x)
    if len(x) == 0:
        raise DomainError("cannot score an empty dataset")
    return float(np.mean(entropy(softmax_temp(forward_logits(spec, theta, x)))))


@dataclass
class TaskEval:
    task_id: str
    accuracy: float
    normalized_accuracy: float
    entropy: float


@dataclass
class EvalResult:
    per_task: list[TaskEval] = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([t.accuracy for t in self.per_task]))

    @property
    def mean_normalized_accuracy(self) -> float:
        # ratio per task first, then the mean
        return float(np.mean([t.normalized_accuracy for t in self.per_task]))

    @property
    def mean_entropy(self) -> float:
        return float(np.mean([t.entropy for t in self.per_task]))

    def to_dict(self) -> dict:
        return {
            "per_task": [vars(t) for t in self.per_task],
            "aggregate": {
                "accuracy": self.mean_accuracy,
                "normalized_accuracy": self.mean_normalized_accuracy,
                "entropy": self.mean_entropy,
            },
        }


# ---- reliability ----------------------------------------------------------

@dataclass
class ReliabilityBin:
    lo: float
    hi: float
    confidence: float
    accuracy: float
    count: int


@dataclass
class ReliabilityReport:
    bins: list[ReliabilityBin]
    ece: float

    @property
    def total(self) -> int:
        return sum(b.count for b in self.bins)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "conf", "acc", "count"])
            for b in self.bins:
                w.writerow([repr(b.lo), repr(b.hi), repr(b.confidence), repr(b.accuracy), b.count])

    def to_dict(self) -> dict:
        return {"ece": self.ece, "bins": [vars(b) for b in self.bins]}


def reliability_from_probs(probs: np.ndarray, y: np.ndarray, num_bins: int = 10) -> ReliabilityReport:
    """Equal-width bins over max-softmax confidence; the last bin is closed."""
    if num_bins < 1:
        raise DomainError("num_bins must be >= 1")
    probs = np.atleast_2d(probs)
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == y).astype(np.float64)
    idx = np.minimum((conf * num_bins).astype(np.int64), num_bins - 1)
    n = len(y)
    bins = []
    ece = 0.0
    for b in range(num_bins):
        sel = idx == b
        cnt = int(sel.sum())
        if cnt:
            c = float(conf[sel].mean())
            a = float(correct[sel].mean())
            ece += cnt / n * abs(a - c)
        else:
            c = a = 0.0
        bins.append(ReliabilityBin(b / num_bins, (b + 1) / num_bins, c, a, cnt))
    return ReliabilityReport(bins, float(min(max(ece, 0.0), 1.0)))


def reliability(spec: ModelSpec, theta: ParamVector, data: LabeledSplit,
                num_bins: int = 10, temperature: float = 1.0) -> ReliabilityReport:
    probs = softmax_temp(forward_logits(spec, theta, data.x), temperature)
    return reliability_from_probs(probs, data.y, num_bins)


# ---- temperature scaling --------------------------------------------------

def nll(logits: np.ndarray, y: np.ndarray, T: float = 1.0) -> float:
    lp = log_softmax_temp(logits, T)
    return float(-lp[np.arange(len(y)), y].mean())


def golden_section(f, lo: float, hi: float, tol: float = 1e-4, max_iter: int = 500) -> float:
    """Minimise a unimodal ``f`` on ``[lo, hi]`` to bracket width ``tol``."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def fit_temperature(logits: np.ndarray, y: np.ndarray, lo: float = 0.05, hi: float = 20.0,
                    tol: float = 1e-4) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise DomainError("empty validation set")
    if np.unique(y).size < 2:
        warnings.warn("all validation labels are identical; returning T=1", RuntimeWarning)
        return 1.0
    T = golden_section(lambda t: nll(logits, y, t), lo, hi, tol)
    # never return something worse than the identity
    return T if nll(logits, y, T) <= nll(logits, y, 1.0) else 1.0


def temperature_scale_fit(spec: ModelSpec, theta: ParamVector, data: LabeledSplit) -> float:
    """Temperature minimising validation NLL of ``softmax(logits / T)``."""
    return fit_temperature(forward_logits(spec, theta, data.x), data.y)


def scaling_sweep(spec: ModelSpec, theta_pre: ParamVector, tau: ParamVector,
                  data: LabeledSplit, kappas=KAPPA_GRID) -> list[tuple[float, float]]:
    """Accuracy of ``theta_pre + kappa * tau`` along a grid of ``kappa``."""
    out = []
    for k in kappas:
        k = float(k)
        if k == 0.0:
            theta = theta_pre
        elif k == 1.0:
            theta = theta_pre + tau
        else:
            theta = theta_pre + tau * k
        out.append((k, accuracy(spec, theta, data)))
    return out
