"""Sparse symmetric operators, preconditioned CG and condition numbers.

Matrices are plain ``scipy.sparse.csr_matrix`` objects; this module adds the
assembly staging, a deterministic Jacobi-preconditioned conjugate gradient
solver that handles several right-hand sides at once, and spectral
condition-number estimates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
SINGULAR_RTOL = 1e-14


class SolverError(RuntimeError):
    """Iterative solve failed (breakdown or non-convergence)."""


class TripletBuffer:
    """Staging area for (row, col, value) contributions of element matrices."""

    def __init__(self):
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []

    def add(self, rows, cols, vals):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        if not rows.size == cols.size == vals.size:
            raise ValueError("rows, cols and vals must have equal length")
        self._rows.append(rows)
        self._cols.append(cols)
        self._vals.append(vals)

    def add_element(self, dofs, ke):
        """Scatter dense element matrices ``ke[e]`` onto ``dofs[e]``."""
        dofs = np.asarray(dofs, dtype=np.int64)
        k = dofs.shape[1]
        self.add(np.repeat(dofs, k, axis=1), np.tile(dofs, (1, k)), ke)

    def arrays(self):
        if not self._rows:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, np.zeros(0)
        return np.concatenate(self._rows), np.concatenate(self._cols), np.concatenate(self._vals)

    def __len__(self):
        return sum(r.size for r in self._rows)


def assemble(triplets: TripletBuffer, n: int) -> sp.csr_matrix:
    """Sum duplicate contributions into an n x n CSR matrix."""
    rows, cols, vals = triplets.arrays()
    if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= n or cols.max() >= n):
        raise IndexError(f"triplet index out of range for dimension {n}")
    A = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def spmv(A, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if A.shape[1] != v.shape[0]:
        raise ValueError(f"dimension mismatch: matrix {A.shape}, vector {v.shape}")
    return A @ v


def symmetry_error(A) -> float:
    """max |A - A^T| / max |A| (0 for the zero matrix)."""
    scale = abs(A).max() if A.nnz else 0.0
    if scale == 0:
        return 0.0
    d = (A - A.T).tocoo()
    return float(abs(d.data).max() / scale) if d.nnz else 0.0


def kron3(A) -> sp.csr_matrix:
    """Block copy of a scalar nodal operator onto node-major xyz-minor dofs."""
    return sp.kron(A, sp.identity(3), format="csr")


@dataclass
class CGInfo:
    converged: bool
    iterations: int
    residual: np.ndarray  # relative residual per right-hand side


def cg_solve(A, b, tol: float = DEFAULT_TOL, max_iter: int | None = None, x0=None,
             preconditioner: str = "jacobi") -> tuple[np.ndarray, CGInfo]:
    """Solve ``A x = b`` for SPD ``A`` by preconditioned conjugate gradients.

    ``b`` may be a vector or an (n, k) block; each column runs its own CG
    recurrence (vectorised), and stops updating once
    ``||A x - b|| <= tol ||b||``. Returns the iterate and a :class:`CGInfo`.
    On non-convergence the final iterate is returned with
    ``converged=False``; a NaN/indefinite breakdown raises :class:`SolverError`.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=float)
    vec = b.ndim == 1
    B = b[:, None] if vec else b
    n, k = B.shape
    if A.shape != (n, n):
        raise ValueError(f"dimension mismatch: matrix {A.shape}, rhs {b.shape}")
    if max_iter is None:
        max_iter = 10 * n
    if preconditioner == "jacobi":
        d = A.diagonal()
        if np.any(d <= 0):
            raise SolverError("non-positive diagonal entry; matrix is not SPD")
        dinv = (1.0 / d)[:, None]
    elif preconditioner is None or preconditioner == "none":
        dinv = np.ones((n, 1))
    else:
        raise ValueError(f"unknown preconditioner {preconditioner!r}")

    bnorm = np.linalg.norm(B, axis=0)
    X = np.zeros_like(B) if x0 is None else np.array(x0, dtype=float).reshape(n, k)
    R = B - A @ X if x0 is not None else B.copy()
    target = tol * bnorm
    active = np.linalg.norm(R, axis=0) > target
    Z = dinv * R
    P = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    it = 0
    while active.any() and it < max_iter:
        it += 1
        AP = A @ P
        pap = np.einsum("ij,ij->j", P, AP)
        if np.any(~np.isfinite(pap)) or np.any(pap[active] <= 0):
            raise SolverError(f"CG breakdown at iteration {it} (p'Ap = {pap[active].min():.3e})")
        alpha = np.where(active, rz / np.where(active, pap, 1.0), 0.0)
        X += alpha * P
        R -= alpha * AP
        rnorm = np.linalg.norm(R, axis=0)
        if not np.all(np.isfinite(rnorm)):
            raise SolverError(f"CG produced NaN at iteration {it}")
        active &= rnorm > target
        Z = dinv * R
        rz_new = np.einsum("ij,ij->j", R, Z)
        beta = np.where(active, rz_new / np.where(rz != 0, rz, 1.0), 0.0)
        P = Z + beta * P
        rz = rz_new
    # true residual, not the recurrence
    res = np.linalg.norm(B - A @ X, axis=0) / np.where(bnorm > 0, bnorm, 1.0)
    converged = bool(np.all(res <= tol * 1.0001) or not active.any())
    info = CGInfo(converged=converged, iterations=it, residual=res)
    if not converged:
        log.warning("CG did not converge in %d iterations (residual %.3e)", it, res.max())
    return (X[:, 0] if vec else X), info


def solve_spd(A, b, tol: float = DEFAULT_TOL, max_iter: int | None = None) -> np.ndarray:
    """:func:`cg_solve` that raises :class:`SolverError` on non-convergence."""
    x, info = cg_solve(A, b, tol=tol, max_iter=max_iter)
    if not info.converged:
        raise SolverError(f"CG failed to reach tol {tol:g} in {info.iterations} iterations "
                          f"(residual {info.residual.max():.3e})")
    return x


def _dense(A) -> np.ndarray:
    return A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)


def condition_number(A, method: str = "dense", symmetric: bool | None = None) -> float:
    """Spectral condition number; ``inf`` when numerically singular.

    Symmetric matrices use the eigenvalue ratio, general (e.g. normalised
    explicit filter) matrices the singular value ratio.
    """
    if symmetric is None:
        symmetric = (symmetry_error(A) if sp.issparse(A) else
                     float(np.abs(A - A.T).max() / max(np.abs(A).max(), 1e-300))) <= 1e-12
    if method == "dense":
        M = _dense(A)
        if symmetric:
            w = np.abs(scipy.linalg.eigvalsh(M))
        else:
            w = scipy.linalg.svdvals(M)
        hi, lo = w.max(), w.min()
    elif method == "lanczos":
        M = sp.csr_matrix(A)
        if not symmetric:
            M = (M.T @ M).tocsr()
        n = M.shape[0]
        hi = spla.eigsh(M, k=1, which="LA", return_eigenvectors=False, tol=1e-8,
                        v0=np.ones(n))[0]
        # shift-invert about zero (uses scipy's sparse LU internally)
        lo = spla.eigsh(M, k=1, sigma=0.0, which="LM", return_eigenvectors=False,
                        tol=1e-8, v0=np.ones(n))[0]
        hi, lo = abs(hi), abs(lo)
        if not symmetric:
            hi, lo = np.sqrt(hi), np.sqrt(lo)
    else:
        raise ValueError(f"unknown method {method!r}")
    if lo <= SINGULAR_RTOL * hi:
        return float("inf")
    return float(hi / lo)


def write_matrix_market(A, path) -> None:
    import scipy.io

    scipy.io.mmwrite(str(path), sp.coo_matrix(A))
