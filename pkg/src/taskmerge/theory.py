"""Quadratic two-task model of calibrated versus plain fine-tuning.

Each task has a cross-entropy surrogate ``J(theta) = g.theta + 1/2 theta' H theta``
around a shared base point at the origin, and a calibration penalty with
gradient ``b`` and curvature ``A`` weighted by ``lam_cal``.  Task vectors are
exact minimiser offsets (one Newton step); the first-order forms expand the
calibrated inverse in ``lam_cal``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, NumericError

COND_LIMIT = 1e12


class NeumannDivergenceError(DomainError):
    def __init__(self, spectral_norm: float):
        super().__init__(
            f"Neumann series diverges: ||lam H^-1 A||_2 = {spectral_norm:.6g} >= 1"
        )
        self.spectral_norm = spectral_norm


def _sym(M, name: str) -> np.ndarray:
    M = np.array(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DomainError(f"{name} must be a square matrix, got shape {M.shape}")
    if not np.allclose(M, M.T, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(M).max(initial=0.0))):
        raise DomainError(f"{name} must be symmetric")
    return 0.5 * (M + M.T)


@dataclass(frozen=True, eq=False)
class QuadTask:
    H: np.ndarray
    g: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lam_cal: float = 0.0

    def __post_init__(self):
        H = _sym(self.H, "H")
        A = _sym(self.A, "A")
        g = np.asarray(self.g, dtype=np.float64).reshape(-1)
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        n = H.shape[0]
        if A.shape != H.shape or g.size != n or b.size != n:
            raise DomainError("H, A, g and b have inconsistent dimensions")
        if not self.lam_cal >= 0:
            raise DomainError("lam_cal must be >= 0")
        if np.linalg.eigvalsh(H)[0] <= 0:
            raise DomainError("H must be positive definite")
        for name, v in (("H", H), ("A", A), ("g", g), ("b", b)):
            object.__setattr__(self, name, v)
        object.__setattr__(self, "lam_cal", float(self.lam_cal))

    @property
    def dim(self) -> int:
        return self.g.size

    def with_lambda(self, lam_cal: float) -> QuadTask:
        return QuadTask(self.H, self.g, self.A, self.b, lam_cal)

    def ce_loss(self, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        return float(self.g @ theta + 0.5 * theta @ self.H @ theta)

    def cal_loss(self, theta) -> float:
        """Quadratic model of the calibrated objective (CE plus weighted penalty)."""
        theta = np.asarray(theta, dtype=np.float64)
        pen = self.b @ theta + 0.5 * theta @ self.A @ theta
        return self.ce_loss(theta) + self.lam_cal * float(pen)


@dataclass(frozen=True)
class MergeCoeffs:
    """Positive weights of the two task vectors in the merged point.

    ``alpha`` here is the merge weight on task 1, unrelated to the label
    smoothing strength that shares the letter elsewhere.
    """

    alpha: float
    beta_m: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta_m > 0):
            raise DomainError("merge coefficients must be strictly positive")


def _solve_pd(M: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    eig = np.linalg.eigvalsh(M)
    if eig[0] <= 0:
        raise DomainError(f"{what} is not positive definite (min eigenvalue {eig[0]:.3g})")
    cond = eig[-1] / eig[0]
    if cond > COND_LIMIT:
        raise NumericError(f"{what} is ill-conditioned", condition_number=float(cond))
    return np.linalg.solve(M, rhs)


def newton_task_vector(q: QuadTask) -> np.ndarray:
    """Minimiser offset of the CE quadratic, ``-H^-1 g``."""
    return -_solve_pd(q.H, q.g, "H")


def calibrated_task_vector_exact(q: QuadTask) -> np.ndarray:
    """Exact minimiser offset of the calibrated quadratic."""
    if q.lam_cal == 0.0:
        return newton_task_vector(q)
    return -_solve_pd(q.H + q.lam_cal * q.A, q.g + q.lam_cal * q.b, "H + lam_cal A")


def calibration_shift(q: QuadTask, full_firstorder: bool = False) -> np.ndarray:
    """First-order change of the task vector caused by calibration.

    The short form is ``-lam H^-1 b``; ``full_firstorder`` adds the
    ``lam H^-1 A H^-1 g`` term that is negligible only for small ``g``.
    """
    if q.lam_cal == 0.0:
        return np.zeros(q.dim)
    shift = -q.lam_cal * _solve_pd(q.H, q.b, "H")
    if full_firstorder:
        hg = _solve_pd(q.H, q.g, "H")
        shift = shift + q.lam_cal * _solve_pd(q.H, q.A @ hg, "H")
    return shift


def calibrated_task_vector_firstorder(q: QuadTask, full_firstorder: bool = False) -> np.ndarray:
    return newton_task_vector(q) + calibration_shift(q, full_firstorder)


def neumann_inverse(H, A, lam_cal: float, order: int = 1) -> np.ndarray:
    """Truncated series for ``(H + lam A)^-1`` around ``H^-1``.

    ``order=1`` gives ``H^-1 - lam H^-1 A H^-1``.  Raises when the series
    would not converge (``||lam H^-1 A||_2 >= 1``).
    """
    H = _sym(H, "H")
    A = _sym(A, "A")
    if order < 0:
        raise DomainError("order must be >= 0")
    Hinv = _solve_pd(H, np.eye(H.shape[0]), "H")
    X = lam_cal * Hinv @ A
    rho = float(np.linalg.norm(X, 2))
    if rho >= 1.0:
        raise NeumannDivergenceError(rho)
    term = Hinv
    out = Hinv.copy()
    for _ in range(order):
        term = -X @ term
        out = out + term
    return out


def neumann_spectral_norm(q: QuadTask) -> float:
    Hinv = _solve_pd(q.H, np.eye(q.dim), "H")
    return float(np.linalg.norm(q.lam_cal * Hinv @ q.A, 2))


def merged_loss_delta(q1: QuadTask, q2: QuadTask, c: MergeCoeffs, eval_task: int,
                      full_firstorder: bool = False) -> tuple[float, float]:
    """CE loss of the calibrated merge minus that of the plain merge, on one task.

    Returns ``(exact_delta, firstorder_delta)``.  The default first-order
    value is the leading term ``alpha g.d1 + beta g.d2`` with the short
    calibration shifts.  With ``full_firstorder`` it is the complete
    linearisation in ``lam_cal``, whose residual is second order.
    """
    if eval_task not in (1, 2):
        raise DomainError("eval_task must be 1 or 2")
    if q1.dim != q2.dim:
        raise DomainError("tasks live in different dimensions")
    qe = q1 if eval_task == 1 else q2
    ce = c.alpha * newton_task_vector(q1) + c.beta_m * newton_task_vector(q2)
    cal = c.alpha * calibrated_task_vector_exact(q1) + c.beta_m * calibrated_task_vector_exact(q2)
    exact = qe.ce_loss(cal) - qe.ce_loss(ce)
    shift = c.alpha * calibration_shift(q1, full_firstorder) + c.beta_m * calibration_shift(q2, full_firstorder)
    if full_firstorder:
        first = float((qe.g + qe.H @ ce) @ shift)
    else:
        first = float(qe.g @ shift)
    return float(exact), first


# ---- instances and sweeps ---------------------------------------------------

def random_spd(dim: int, rng: np.random.Generator, lo: float = 0.5, hi: float = 4.0) -> np.ndarray:
    """``Q diag(d) Q'`` with a random orthogonal ``Q`` and ``d`` uniform in [lo, hi]."""
    Q, R = np.linalg.qr(rng.normal(size=(dim, dim)))
    Q = Q * np.sign(np.diag(R))
    d = rng.uniform(lo, hi, size=dim)
    return (Q * d) @ Q.T


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def random_quad_task(dim: int, rng: np.random.Generator, lam_cal: float = 0.0,
                     penalty_curvature: str = "spd", g_scale: float = 1.0,
                     curvature_range: tuple[float, float] = (0.1, 1.0)) -> QuadTask:
    """Seeded instance: H with eigenvalues in [0.5, 4], unit ``b``, ``g`` of
    norm ``g_scale``, and ``A`` SPD (eigenvalues in ``curvature_range``) or zero."""
    if dim < 1:
        raise DomainError("dim must be >= 1")
    if penalty_curvature not in ("spd", "zero"):
        raise DomainError("penalty_curvature must be 'spd' or 'zero'")
    H = random_spd(dim, rng)
    g = g_scale * _unit(rng.normal(size=dim))
    b = _unit(rng.normal(size=dim))
    if penalty_curvature == "spd":
        A = random_spd(dim, rng, *curvature_range)
    else:
        A = np.zeros((dim, dim))
    return QuadTask(H, g, A, b, lam_cal)


def random_task_pair(seed: int, dim: int = 8, lam_cal: float = 1e-3, **kw) -> tuple[QuadTask, QuadTask]:
    rng = np.random.default_rng(seed)
    return random_quad_task(dim, rng, lam_cal, **kw), random_quad_task(dim, rng, lam_cal, **kw)


def find_degradation_witness(seeds, coeffs: MergeCoeffs, dim: int = 8, lam_cal: float = 1e-3,
                             rel_tol: float | None = None, **kw):
    """First seed whose task pair has a calibrated merge with strictly higher
    CE loss on both tasks.  With ``rel_tol``, the leading first-order term
    must also match the exact change to that relative tolerance."""
    for seed in seeds:
        q1, q2 = random_task_pair(seed, dim, lam_cal, **kw)
        ok = True
        for t in (1, 2):
            exact, first = merged_loss_delta(q1, q2, coeffs, t)
            if not exact > 0:
                ok = False
                break
            if rel_tol is not None and abs(first - exact) > rel_tol * abs(exact):
                ok = False
                break
        if ok:
            return seed
    return None


@dataclass
class SweepRow:
    lam: float
    exact_delta: float
    firstorder_delta: float
    error: float
    spectral_norm: float


def lambda_sweep(q1: QuadTask, q2: QuadTask, c: MergeCoeffs, eval_task: int, lambdas,
                 full_firstorder: bool = False) -> list[SweepRow]:
    """Re-evaluate the merged-loss change with both calibration weights set to each value."""
    rows = []
    for lam in lambdas:
        a, b = q1.with_lambda(lam), q2.with_lambda(lam)
        exact, first = merged_loss_delta(a, b, c, eval_task, full_firstorder)
        rho = max(neumann_spectral_norm(a), neumann_spectral_norm(b))
        rows.append(SweepRow(float(lam), exact, first, abs(exact - first), rho))
    return rows


def write_sweep_csv(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "exact_delta", "firstorder_delta", "error", "spectral_norm"])
        for r in rows:
            w.writerow([repr(r.lam), repr(r.exact_delta), repr(r.firstorder_delta),
                        repr(r.error), repr(r.spectral_norm)])
