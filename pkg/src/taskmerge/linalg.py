"""Dense vector/matrix primitives and probability-space helpers.

Everything here is a pure function on float64 numpy arrays.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, NumericError

PROB_FLOOR = 1e-12
MAX_SWEEPS = 200


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DomainError(f"length mismatch: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity undefined for a zero-norm vector")
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c))


def log_softmax_temp(logits, T: float = 1.0) -> np.ndarray:
    """Row-wise log softmax of ``logits / T`` (last axis)."""
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_temp(logits, T: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis, stable under max-shift."""
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_divergence(p, q) -> np.ndarray | float:
    """KL(p || q) along the last axis with 0 ln 0 := 0.

    Both arguments are clamped from below at ``PROB_FLOOR`` inside the logs,
    so a zero in ``q`` where ``p`` has mass gives a large finite value.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DomainError(f"shape mismatch: {p.shape} vs {q.shape}")
    logp = np.log(np.maximum(p, PROB_FLOOR))
    logq = np.log(np.maximum(q, PROB_FLOOR))
    kl = np.where(p > 0, p * (logp - logq), 0.0).sum(axis=-1)
    kl = np.maximum(kl, 0.0)
    return float(kl) if kl.ndim == 0 else kl


def entropy(p) -> np.ndarray | float:
    p = np.asarray(p, dtype=np.float64)
    h = -np.where(p > 0, p * np.log(np.maximum(p, PROB_FLOOR)), 0.0).sum(axis=-1)
    h = np.maximum(h, 0.0)
    return float(h) if h.ndim == 0 else h


def _complete_basis(U: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of U not flagged in ``keep`` with an orthonormal
    completion of the kept ones (Gram-Schmidt against the standard basis)."""
    m = U.shape[0]
    out = U.copy()
    basis = [out[:, j] for j in range(out.shape[1]) if keep[j]]
    candidates = iter(np.eye(m))
    for j in range(out.shape[1]):
        if keep[j]:
            continue
        for e in candidates:
            v = e.copy()
            for _ in range(2):
                for b in basis:
                    v -= np.dot(b, v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                out[:, j] = v
                basis.append(v)
                break
        else:  # pragma: no cover - m >= n guarantees enough candidates
            raise NumericError("could not complete orthonormal basis")
    return out


def svd_thin(M, tol: float | None = None, max_sweeps: int = MAX_SWEEPS):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``(U, S, V)`` with ``M = U @ diag(S) @ V.T``, ``S`` descending,
    ``U`` of shape (m, k) and ``V`` of shape (n, k), ``k = min(m, n)``.
    """
    A = np.array(M, dtype=np.float64, copy=True)
    if A.ndim != 2:
        raise DomainError(f"expected a 2-D matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise DomainError("matrix has non-finite entries")
    transposed = A.shape[0] < A.shape[1]
    if transposed:
        A = A.T
    m, n = A.shape
    if tol is None:
        tol = max(m, 1) * np.finfo(np.float64).eps
    V = np.eye(n)
    if n == 0 or m == 0:
        U, S, V = np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0))
        return (V, S, U) if transposed else (U, S, V)

    # columns below this squared norm are treated as numerically zero
    floor = (np.finfo(np.float64).eps * max(float(np.abs(A).max()), 1e-300)) ** 2 * m * n
    for sweep in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ci, cj = A[:, i], A[:, j]
                alpha = float(ci @ ci)
                beta = float(cj @ cj)
                if alpha <= floor or beta <= floor:
                    continue
                gamma = float(ci @ cj)
                if abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ai = ci.copy()
                A[:, i] = c * ai - s * cj
                A[:, j] = s * ai + c * A[:, j]
                vi = V[:, i].copy()
                V[:, i] = c * vi - s * V[:, j]
                V[:, j] = s * vi + c * V[:, j]
        if not rotated:
            break
    else:
        raise NumericError(
            "Jacobi SVD did not converge",
            sweeps=max_sweeps,
            shape=(m, n),
            offdiag=float(np.abs(np.triu(A.T @ A, 1)).max()),
        )

    S = np.sqrt(np.einsum("ij,ij->j", A, A))
    order = np.argsort(-S, kind="stable")
    S = S[order]
    A = A[:, order]
    V = V[:, order]
    smax = S[0] if S.size else 0.0
    keep = S > max(smax * 1e-13, 1e-300)
    U = np.zeros_like(A)
    U[:, keep] = A[:, keep] / S[keep]
    if not np.all(keep):
        S = np.where(keep, S, 0.0)
        U = _complete_basis(U, keep)
    if transposed:
        return V, S, U
    return U, S, V
