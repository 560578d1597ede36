"""Task vectors and the merge strategies built on them.

All strategies except uniform averaging are linear in the shared
coefficient ``lam``; each one is computed as a unit-coefficient merged
delta (``*_delta``) which the public ``merge_*`` functions scale and add
to ``theta_pre``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .linalg import cosine_similarity, svd_thin
from .model import ParamVector

METHODS = ("uniform", "task_arithmetic", "ties", "consensus", "tsvm")
LAMBDA_GRID = tuple(round(0.05 * i, 10) for i in range(21))


@dataclass(frozen=True, eq=False)
class TaskVector:
    delta: ParamVector
    task_id: str = ""
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.delta.values)):
            raise DomainError(f"task vector {self.task_id!r} has non-finite entries")

    def norm(self) -> float:
        return self.delta.norm()

    def scaled(self, kappa: float) -> TaskVector:
        meta = dict(self.train_meta, kappa=self.train_meta.get("kappa", 1.0) * kappa)
        return TaskVector(self.delta * kappa, self.task_id, meta)


@dataclass(frozen=True)
class MergeConfig:
    method: str = "task_arithmetic"
    lam: float = 1.0
    lambda_grid: tuple[float, ...] = LAMBDA_GRID
    ties_keep_fraction: float = 0.2
    consensus_k: int = 2
    tall_weight: float = 1.0
    tsvm_rank_policy: str = "auto"  # "auto" | "full" | "topk"
    tsvm_rank: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise DomainError(f"unknown merge method {self.method!r}")
        if not 0.0 < self.ties_keep_fraction <= 1.0:
            raise DomainError("ties_keep_fraction must lie in (0, 1]")
        if self.consensus_k < 1:
            raise DomainError("consensus_k must be >= 1")
        if not self.tall_weight > 0:
            raise DomainError("tall_weight must be positive")
        if self.tsvm_rank_policy not in ("auto", "full", "topk"):
            raise DomainError(f"unknown TSVM rank policy {self.tsvm_rank_policy!r}")
        if self.tsvm_rank_policy == "topk" and self.tsvm_rank < 1:
            raise DomainError("topk rank policy needs tsvm_rank >= 1")
        if not self.lambda_grid:
            raise DomainError("lambda grid is empty")
        object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))


def compute_task_vector(theta_t: ParamVector, theta_pre: ParamVector, task_id: str = "",
                        train_meta: dict | None = None) -> TaskVector:
    theta_t.check_compatible(theta_pre)
    return TaskVector(theta_t - theta_pre, task_id, dict(train_meta or {}))


def _stack(task_vectors) -> np.ndarray:
    tvs = list(task_vectors)
    if not tvs:
        raise DomainError("no task vectors to merge")
    smap = tvs[0].delta.shape_map
    for tv in tvs[1:]:
        if tv.delta.shape_map != smap:
            raise DomainError("task vectors have different shape maps")
    return np.stack([tv.delta.values for tv in tvs])


def _apply(theta_pre: ParamVector, delta: np.ndarray, lam: float) -> ParamVector:
    if theta_pre.values.size != delta.size:
        raise DomainError("merged delta does not match the pretrained parameters")
    return theta_pre.like(theta_pre.values + lam * delta)


# ---- uniform / task arithmetic ---------------------------------------------

def uniform_delta(task_vectors) -> np.ndarray:
    return _stack(task_vectors).mean(axis=0)


def merge_uniform(theta_pre: ParamVector, task_vectors) -> ParamVector:
    return _apply(theta_pre, uniform_delta(task_vectors), 1.0)


def task_arithmetic_delta(task_vectors) -> np.ndarray:
    return _stack(task_vectors).sum(axis=0)


def merge_task_arithmetic(theta_pre: ParamVector, task_vectors, lam: float) -> ParamVector:
    if lam < 0:
        raise DomainError("lambda must be >= 0")
    return _apply(theta_pre, task_arithmetic_delta(task_vectors), lam)


# ---- TIES -----------------------------------------------------------------

def ties_masks(task_vectors, keep_fraction: float) -> np.ndarray:
    """Per-task top-|keep_fraction| magnitude mask over the whole vector."""
    if not 0.0 < keep_fraction <= 1.0:
        raise DomainError("keep_fraction must lie in (0, 1]")
    taus = _stack(task_vectors)
    d = taus.shape[1]
    k = min(d, max(1, math.ceil(keep_fraction * d - 1e-9)))
    masks = np.zeros(taus.shape, dtype=bool)
    for t in range(taus.shape[0]):
        # stable sort: equal magnitudes keep the lower index
        top = np.argsort(-np.abs(taus[t]), kind="stable")[:k]
        masks[t, top] = True
    return masks


def ties_delta(task_vectors, keep_fraction: float = 0.2):
    """Trim, elect sign, disjoint mean.  Returns ``(delta, agreeing mask)``."""
    taus = _stack(task_vectors)
    trimmed = np.where(ties_masks(task_vectors, keep_fraction), taus, 0.0)
    elected = np.sign(trimmed.sum(axis=0))
    agree = (np.sign(trimmed) == elected) & (trimmed != 0.0)
    count = agree.sum(axis=0)
    total = np.where(agree, trimmed, 0.0).sum(axis=0)
    delta = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return delta, agree


def merge_ties(theta_pre: ParamVector, task_vectors, lam: float,
               keep_fraction: float = 0.2) -> ParamVector:
    return _apply(theta_pre, ties_delta(task_vectors, keep_fraction)[0], lam)


# ---- Consensus ------------------------------------------------------------

def tall_masks(task_vectors, tall_weight: float = 1.0) -> np.ndarray:
    """``|tau_t| >= w * |sum_s tau_s - tau_t|`` coordinate-wise."""
    taus = _stack(task_vectors)
    total = taus.sum(axis=0)
    return np.abs(taus) >= tall_weight * np.abs(total[None, :] - taus)


def consensus_delta(task_vectors, k: int = 2, tall_weight: float = 1.0):
    taus = _stack(task_vectors)
    if k < 1:
        raise DomainError("k must be >= 1")
    tall = tall_masks(task_vectors, tall_weight)
    cons = tall.sum(axis=0) >= k
    return (taus * cons[None, :]).sum(axis=0), cons


def merge_consensus(theta_pre: ParamVector, task_vectors, lam: float, tall_weight: float = 1.0,
                    k: int = 2) -> ParamVector:
    return _apply(theta_pre, consensus_delta(task_vectors, k, tall_weight)[0], lam)


# ---- TSVM -----------------------------------------------------------------

WHITEN_REG = 1e-10


def whiten(M: np.ndarray) -> np.ndarray:
    """``M (M^T M)^{-1/2}``: the nearest matrix with orthonormal columns.

    Computed from the SVD ``M = P S Q^T`` as ``P Q^T``.  A singular Gram
    matrix is regularised with ``WHITEN_REG * I`` and a warning.
    """
    P, S, Q = svd_thin(M)
    if M.shape[1] > M.shape[0] or (S.size and S[-1] <= math.sqrt(WHITEN_REG) * max(S[0], 1.0)):
        warnings.warn("rank-deficient whitening Gram matrix; regularising", RuntimeWarning)
        scale = S / np.sqrt(S * S + WHITEN_REG)
        return (P * scale) @ Q.T
    return P @ Q.T


def _tsvm_rank(policy: str, rank: int, m: int, n: int, T: int) -> int:
    full = min(m, n)
    if policy == "full":
        return full
    if policy == "topk":
        return min(rank, full)
    return max(1, full // T)


def tsvm_layer_delta(mats: list[np.ndarray], rank_policy: str = "auto", rank: int = 0,
                     return_factors: bool = False):
    """Whitened-factor merge of one matrix-shaped layer across tasks."""
    T = len(mats)
    m, n = mats[0].shape
    r = _tsvm_rank(rank_policy, rank, m, n, T)
    Us, Ss, Vs = [], [], []
    for M in mats:
        U, S, V = svd_thin(M)
        keep = min(r, int(np.sum(S > 1e-12 * max(S[0], 1e-300)))) if S.size else 0
        Us.append(U[:, :keep])
        Ss.append(S[:keep])
        Vs.append(V[:, :keep])
    Sflat = np.concatenate(Ss)
    if Sflat.size == 0:
        out = np.zeros((m, n))
        return (out, None, None) if return_factors else out
    Uhat = whiten(np.concatenate(Us, axis=1))
    Vhat = whiten(np.concatenate(Vs, axis=1))
    out = (Uhat * Sflat) @ Vhat.T
    return (out, Uhat, Vhat) if return_factors else out


def tsvm_delta(task_vectors, rank_policy: str = "auto", rank: int = 0) -> np.ndarray:
    tvs = list(task_vectors)
    taus = _stack(tvs)
    smap = tvs[0].delta.shape_map
    out = np.zeros(taus.shape[1])
    offset = 0
    for s in smap:
        sl = slice(offset, offset + s.size)
        offset += s.size
        if s.kind == "weight" and s.rows > 1 and s.cols > 1:
            mats = [taus[t, sl].reshape(s.rows, s.cols) for t in range(len(tvs))]
            out[sl] = tsvm_layer_delta(mats, rank_policy, rank).reshape(-1)
        else:
            out[sl] = taus[:, sl].sum(axis=0)
    return out


def merge_tsvm(theta_pre: ParamVector, task_vectors, lam: float, rank_policy: str = "auto",
               rank: int = 0) -> ParamVector:
    return _apply(theta_pre, tsvm_delta(task_vectors, rank_policy, rank), lam)


# ---- dispatch, tuning, diagnostics ------------------------------------------

@dataclass
class MergePlan:
    """A unit-coefficient merged delta plus the masks that produced it."""

    method: str
    delta: np.ndarray
    masks: np.ndarray | None = None  # (T, d) or (d,) boolean
    uses_lambda: bool = True

    def merged(self, theta_pre: ParamVector, lam: float) -> ParamVector:
        return _apply(theta_pre, self.delta, lam if self.uses_lambda else 1.0)

    def mask_densities(self) -> list[float] | None:
        if self.masks is None:
            return None
        m = np.atleast_2d(self.masks)
        return [float(row.mean()) for row in m]


def plan_merge(task_vectors, cfg: MergeConfig) -> MergePlan:
    tvs = list(task_vectors)
    if cfg.method == "uniform":
        return MergePlan("uniform", uniform_delta(tvs), uses_lambda=False)
    if cfg.method == "task_arithmetic":
        return MergePlan("task_arithmetic", task_arithmetic_delta(tvs))
    if cfg.method == "ties":
        delta, agree = ties_delta(tvs, cfg.ties_keep_fraction)
        return MergePlan("ties", delta, agree)
    if cfg.method == "consensus":
        delta, cons = consensus_delta(tvs, cfg.consensus_k, cfg.tall_weight)
        return MergePlan("consensus", delta, cons)
    return MergePlan("tsvm", tsvm_delta(tvs, cfg.tsvm_rank_policy, cfg.tsvm_rank))


def merge(theta_pre: ParamVector, task_vectors, cfg: MergeConfig, lam: float | None = None) -> ParamVector:
    return plan_merge(task_vectors, cfg).merged(theta_pre, cfg.lam if lam is None else lam)


def tune_lambda(merge_fn, validation_score, grid=LAMBDA_GRID):
    """Grid search for the shared coefficient.

    ``merge_fn(lam) -> ParamVector`` and ``validation_score(theta) -> float``
    (mean validation accuracy).  Returns ``(best_lam, [(lam, score), ...])``;
    ties go to the smaller ``lam``.
    """
    grid = sorted(float(v) for v in grid)
    if not grid:
        raise DomainError("lambda grid is empty")
    scores = [(lam, float(validation_score(merge_fn(lam)))) for lam in grid]
    best_lam, best = scores[0]
    for lam, s in scores[1:]:
        if s > best:
            best_lam, best = lam, s
    return best_lam, scores


def cosine_diagnostics(merged_delta, task_vectors) -> list[float]:
    """cos(merged delta, tau_t) for each task."""
    merged_delta = np.asarray(getattr(merged_delta, "values", merged_delta))
    return [cosine_similarity(merged_delta, tv.delta.values) for tv in task_vectors]
