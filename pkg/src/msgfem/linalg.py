"""Sparse SPD solves, Schur complements and dense symmetric generalized eigensolves."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class SpdFactorization:
    """Sparse direct factorization of an SPD matrix with a residual check on every solve.

    Falls back to Jacobi-preconditioned CG (rtol 1e-12, at most ``10 n`` iterations)
    when the direct factorization fails.
    """

    residual_tol = 1e-10

    def __init__(self, A: sp.spmatrix):
        self.A = sp.csc_matrix(A)
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"matrix must be square, got {self.A.shape}")
        self.n = n
        self._lu = None
        if n == 0:
            return
        diag = self.A.diagonal()
        if np.any(diag <= 0):
            k = int(np.argmin(diag))
            raise SolverError(f"nonpositive diagonal entry {diag[k]:.3e} at row {k}: matrix not SPD")
        try:
            self._lu = spla.splu(self.A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                 options={"SymmetricMode": True})
        except RuntimeError as exc:
            log.warning("direct factorization failed (%s); falling back to CG", exc)
        self._diag = diag

    def _cg(self, b: np.ndarray) -> np.ndarray:
        M = sp.diags(1.0 / self._diag)
        x, info = spla.cg(self.A, b, rtol=1e-12, atol=0.0, maxiter=10 * self.n, M=M)
        if info != 0:
            raise SolverError(f"CG did not converge after {info} iterations")
        return x

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"rhs has {b.shape[0]} rows, matrix has {self.n}")
        if self.n == 0:
            return b.copy()
        if self._lu is not None:
            x = self._lu.solve(b)
        elif b.ndim == 1:
            x = self._cg(b)
        else:
            x = np.column_stack([self._cg(col) for col in b.T])
        r = self.A @ x - b
        rn = np.linalg.norm(r, axis=0)
        bn = np.linalg.norm(b, axis=0)
        bad = rn > self.residual_tol * np.maximum(bn, np.finfo(float).tiny)
        if np.any(bad & (bn > 0)):
            worst = float(np.max(rn / np.maximum(bn, np.finfo(float).tiny)))
            raise SolverError(f"solve residual {worst:.3e} exceeds {self.residual_tol:g} (matrix not SPD?)")
        return x


def spd_solve(A: sp.spmatrix, b: np.ndarray) -> np.ndarray:
    return SpdFactorization(A).solve(b)


def _split(K, interior, boundary):
    K = sp.csr_matrix(K)
    return K[interior][:, interior], K[interior][:, boundary], K[boundary][:, boundary]


def schur_complement(K: sp.spmatrix, interior, boundary, factor: SpdFactorization | None = None):
    """Dense ``S = K_BB - K_BI K_II^{-1} K_IB`` and the extension operator ``X = K_II^{-1} K_IB``."""
    K_II, K_IB, K_BB = _split(K, interior, boundary)
    if len(interior) == 0:
        return K_BB.toarray(), np.zeros((0, len(boundary)))
    factor = factor or SpdFactorization(K_II)
    X = factor.solve(K_IB.toarray())
    S = K_BB.toarray() - K_IB.T @ X
    return 0.5 * (S + S.T), X


def schur_apply(K: sp.spmatrix, interior, boundary, g: np.ndarray) -> np.ndarray:
    K_II, K_IB, K_BB = _split(K, interior, boundary)
    g = np.asarray(g, dtype=float)
    if len(interior) == 0:
        return K_BB @ g
    return K_BB @ g - K_IB.T @ spd_solve(K_II, K_IB @ g)


@dataclass
class EigPair:
    eigenvalue: float
    eigenvector: np.ndarray
    b_norm: float


@dataclass
class GevpResult:
    """Finite eigenpairs in nondecreasing order, B-orthonormal columns."""

    values: np.ndarray
    vectors: np.ndarray
    n_infinite: int

    def pairs(self) -> list[EigPair]:
        return [EigPair(float(lam), self.vectors[:, k], 1.0) for k, lam in enumerate(self.values)]

    def __len__(self):
        return self.values.size


def _check_symmetric(M: np.ndarray, name: str, tol: float = 1e-12) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got {M.shape}")
    scale = np.max(np.abs(M)) if M.size else 0.0
    if M.size and np.max(np.abs(M - M.T)) > tol * scale:
        raise ValueError(f"{name} is not symmetric (relative asymmetry {np.max(np.abs(M - M.T)) / scale:.2e})")
    return 0.5 * (M + M.T)


def sym_gevp(A: np.ndarray, B: np.ndarray, n: int | None = None, null_tol: float = 1e-12,
             clamp_tol: float = 1e-10) -> GevpResult:
    """Smallest finite eigenpairs of ``A x = lam B x`` with A symmetric PSD and B symmetric PSD.

    Directions in the numerical nullspace of ``B`` (eigenvalues below
    ``null_tol * trace(B) / dim``) carry infinite eigenvalues and are never
    returned.  The pairs are computed from the definite pencil
    ``A x = theta (A + c B) x`` with ``lam = c theta / (1 - theta)``, which stays
    accurate for the small eigenvalues when ``B`` is badly conditioned.  If
    ``A + c B`` is not positive definite, the nullspace of ``B`` is eliminated
    through a Schur complement of ``A`` instead.  Negative eigenvalues above
    ``-clamp_tol * max|A| / mean(diag B)`` are round-off and clamped to 0.
    """
    A = _check_symmetric(A, "A")
    B = _check_symmetric(B, "B")
    dim = A.shape[0]
    if B.shape != A.shape:
        raise ValueError("A and B must have the same shape")
    if dim == 0:
        return GevpResult(np.zeros(0), np.zeros((0, 0)), 0)
    trace = float(np.trace(B))
    if not trace > 0:
        raise ValueError("B is numerically zero")
    mu, V = np.linalg.eigh(B)
    keep = mu > null_tol * trace / dim
    n_inf = int(dim - keep.sum())
    n_fin = dim - n_inf
    want = n_fin if n is None else min(int(n), n_fin)
    if want <= 0:
        return GevpResult(np.zeros(0), np.zeros((dim, 0)), n_inf)

    amax = float(np.max(np.abs(A)))
    c = amax / float(np.max(np.abs(B))) if amax > 0 else 1.0
    try:
        theta, Y = sla.eigh(A, A + c * B, subset_by_index=[0, want - 1])
        lam = c * theta / (1.0 - theta)
        X = Y * np.sqrt(c / (1.0 - theta))
    except np.linalg.LinAlgError:
        lam, X = _gevp_range_of_b(A, mu, V, keep, want)

    scale = amax / (trace / dim)
    if lam.min() < -clamp_tol * scale:
        raise ValueError(f"negative eigenvalue {lam.min():.3e}: A is not positive semidefinite")
    return GevpResult(np.maximum(lam, 0.0), X, n_inf)


def _gevp_range_of_b(A, mu, V, keep, want):
    Vr, Vn = V[:, keep], V[:, ~keep]
    A_rr = Vr.T @ A @ Vr
    A_rn = Vr.T @ A @ Vn
    A_nn = Vn.T @ A @ Vn
    try:
        Z = sla.cho_solve(sla.cho_factor(A_nn), A_rn.T)
    except np.linalg.LinAlgError:
        # A and B share a nullspace: the pencil is singular there
        Z = np.linalg.lstsq(A_nn, A_rn.T, rcond=None)[0]
    S = A_rr - A_rn @ Z
    lam, Y = sla.eigh(0.5 * (S + S.T), np.diag(mu[keep]), subset_by_index=[0, want - 1])
    return lam, Vr @ Y - Vn @ (Z @ Y)
