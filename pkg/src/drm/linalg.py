"""Dense kernels with explicit contracts: concatenation, thin SVD, and an
independent brute-force singular-value oracle for cross-checking tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceFailure, ShapeMismatch, SizeTooLarge

# Singular values below this fraction of sigma_max count as zero for rank
# purposes; floating-point rank is ill-posed without a cutoff.
SIGMA_ZERO_REL = 1e-12

# Largest Gram dimension svd_oracle accepts; it exists for test-scale
# cross-checks only.
ORACLE_MAX_SIDE = 32


@dataclass(frozen=True)
class ThinSVD:
    """Economy SVD A = U @ diag(sigma) @ Vt with r = min(m, n) components.

    U has orthonormal columns, Vt orthonormal rows, sigma is non-negative
    and non-increasing. Each U column is sign-normalized so its
    largest-magnitude entry is positive (the matching Vt row is flipped
    with it), which pins down the decomposition for full-rank distinct
    spectra.
    """

    U: np.ndarray
    sigma: np.ndarray
    Vt: np.ndarray

    @property
    def rank(self) -> int:
        """Number of singular values above the relative zero cutoff."""
        return int(np.count_nonzero(nonzero_sigma_mask(self.sigma)))


def nonzero_sigma_mask(sigma: np.ndarray) -> np.ndarray:
    """Boolean mask of singular values treated as nonzero."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.size == 0:
        return np.zeros(0, dtype=bool)
    return sigma > SIGMA_ZERO_REL * float(sigma.max(initial=0.0))


def hconcat(mats: list[np.ndarray]) -> np.ndarray:
    """Concatenate matrices side by side; column blocks keep input order."""
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    if not mats:
        raise ValueError("nothing to concatenate")
    rows = mats[0].shape[0]
    for i, m in enumerate(mats):
        if m.ndim != 2 or m.shape[0] != rows:
            raise ShapeMismatch(f"block {i} has shape {m.shape}, expected {rows} rows")
    return np.concatenate(mats, axis=1)


def vconcat(mats: list[np.ndarray]) -> np.ndarray:
    """Stack matrices top to bottom; transpose-dual of :func:`hconcat`."""
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    if not mats:
        raise ValueError("nothing to concatenate")
    cols = mats[0].shape[1]
    for i, m in enumerate(mats):
        if m.ndim != 2 or m.shape[1] != cols:
            raise ShapeMismatch(f"block {i} has shape {m.shape}, expected {cols} columns")
    return np.concatenate(mats, axis=0)


def thin_svd(A: np.ndarray) -> ThinSVD:
    """Economy SVD with deterministic column signs.

    Raises ConvergenceFailure if the backend does not converge.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ShapeMismatch(f"expected a matrix, got shape {A.shape}")
    try:
        U, sigma, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"SVD did not converge on a {A.shape} matrix") from exc
    # Pin the sign ambiguity: largest-|entry| of each U column made positive.
    flip = U[np.abs(U).argmax(axis=0), np.arange(U.shape[1])] < 0
    U = np.where(flip[None, :], -U, U)
    Vt = np.where(flip[:, None], -Vt, Vt)
    return ThinSVD(U, sigma, Vt)


def spectral_norm(A: np.ndarray) -> float:
    """Largest singular value (exact, via SVD)."""
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0:
        return 0.0
    try:
        return float(np.linalg.svd(A, compute_uv=False)[0])
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"SVD did not converge on a {A.shape} matrix") from exc


def _jacobi_eigenvalues(G: np.ndarray, max_sweeps: int = 60) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Written without any library eigensolver so it can serve as an
    independent check of the SVD backend.
    """
    G = np.array(G, dtype=np.float64, copy=True)
    n = G.shape[0]
    if n <= 1:
        return G.reshape(-1)[:1].copy() if n else np.zeros(0)
    fro = math.sqrt(float((G * G).sum()))
    if fro == 0.0:
        return np.zeros(n)
    tol = 1e-15 * fro
    off_mask = ~np.eye(n, dtype=bool)
    for sweep in range(max_sweeps + 1):
        off_sq = float((G[off_mask] ** 2).sum())
        if off_sq <= tol * tol:
            return np.diag(G).copy()
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                gpq = G[p, q]
                if abs(gpq) <= 1e-30 * fro:
                    continue
                tau = (G[q, q] - G[p, p]) / (2.0 * gpq)
                if tau >= 0.0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = 1.0 / (tau - math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                col_p = c * G[:, p] - s * G[:, q]
                col_q = s * G[:, p] + c * G[:, q]
                G[:, p], G[:, q] = col_p, col_q
                row_p = c * G[p, :] - s * G[q, :]
                row_q = s * G[p, :] + c * G[q, :]
                G[p, :], G[q, :] = row_p, row_q
                G[p, q] = 0.0
                G[q, p] = 0.0
    raise ConvergenceFailure(f"Jacobi iteration did not converge in {max_sweeps} sweeps")


def svd_oracle(A: np.ndarray) -> np.ndarray:
    """Singular values via Jacobi eigenvalues of the smaller Gram matrix.

    Test-scale only: the Gram side must not exceed ORACLE_MAX_SIDE. Returns
    min(m, n) values sorted non-increasing.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ShapeMismatch(f"expected a matrix, got shape {A.shape}")
    m, n = A.shape
    if min(m, n) > ORACLE_MAX_SIDE:
        raise SizeTooLarge(
            f"oracle accepts min(m, n) <= {ORACLE_MAX_SIDE}, got {A.shape}"
        )
    gram = A @ A.T if m <= n else A.T @ A
    evals = _jacobi_eigenvalues(gram)
    evals = np.clip(evals, 0.0, None)
    return np.sort(np.sqrt(evals))[::-1]
