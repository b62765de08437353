"""Global MS-GFEM assembly, coarse Galerkin solve, fine reference solve and error metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg import lapack

from .coefficients import CoefficientField, ProblemData
from .decomposition import Decomposition
from .grid_fem import GridMesh, assemble_load, assemble_stiffness, energy_norm
from .linalg import SpdFactorization
from .local_spaces import LocalSpace, OversampledPatch, build_local_space

log = logging.getLogger(__name__)


@dataclass(eq=False)
class FineProblem:
    """Assembled fine-scale system for ``-div(A grad u) = f`` with the mixed boundary data."""

    mesh: GridMesh
    coeff: CoefficientField
    data: ProblemData
    K: sp.csr_matrix
    F: np.ndarray

    @classmethod
    def assemble(cls, mesh: GridMesh, coeff: CoefficientField, data: ProblemData) -> "FineProblem":
        K = assemble_stiffness(mesh, coeff)
        F = assemble_load(mesh, data.f, data.g)
        return cls(mesh, coeff, data, K, F)

    @property
    def dirichlet_values(self) -> np.ndarray:
        x, y = self.mesh.coords[self.mesh.dirichlet_nodes].T
        return np.broadcast_to(np.asarray(self.data.q(x, y), dtype=float), x.shape).copy()


def reference_solve(problem: FineProblem) -> np.ndarray:
    """Standard fine-mesh FE solution with the Dirichlet values imposed by elimination."""
    mesh, K = problem.mesh, problem.K
    free, dirichlet = mesh.free_nodes, mesh.dirichlet_nodes
    qd = problem.dirichlet_values
    u = np.zeros(mesh.n_nodes)
    u[dirichlet] = qd
    rhs = problem.F[free] - K[free][:, dirichlet] @ qd
    u[free] = SpdFactorization(K[free][:, free]).solve(rhs)
    return u


def assemble_global(problem: FineProblem, decomp: Decomposition, spaces: list[LocalSpace],
                    drop_tol: float = 1e-13) -> tuple[np.ndarray, sp.csc_matrix, int]:
    """Glue local particular functions and local bases through the PU operators.

    Returns ``(u_p, C, n_dropped)`` where the columns of ``C`` are the global
    coarse basis vectors ``R_i^T Xi_i(phi|omega_i)``.  Columns with energy norm
    below ``drop_tol`` are dropped.
    """
    if len(spaces) != decomp.n_subdomains:
        raise ValueError("need exactly one local space per subdomain")
    n = problem.mesh.n_nodes
    u_p = np.zeros(n)
    rows, cols, vals = [], [], []
    ncol = 0
    for space in spaces:
        i = space.index
        sub, star = decomp.subdomains[i], decomp.oversampled[i]
        w = decomp.pu_operators[i].weights
        in_star = star.local_index(sub.nodes)
        mask = sub.internal_mask
        u_p[sub.nodes[mask]] += (w * space.particular[in_star])[mask]
        if space.n_loc:
            block = (w[:, None] * space.basis[in_star])[mask]
            r, c = np.nonzero(block)
            rows.append(sub.nodes[mask][r])
            cols.append(c + ncol)
            vals.append(block[r, c])
            ncol += space.n_loc
    if ncol:
        C = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, ncol))
    else:
        C = sp.csc_matrix((n, 0))
    n_dropped = 0
    if ncol:
        energy = np.sqrt(np.maximum(np.asarray((C.multiply(problem.K @ C)).sum(axis=0)).ravel(), 0.0))
        keep = energy > drop_tol
        n_dropped = int((~keep).sum())
        if n_dropped:
            log.info("dropping %d coarse columns with energy <= %g", n_dropped, drop_tol)
            C = C[:, np.flatnonzero(keep)]
    return u_p, C, n_dropped


@dataclass
class GfemSolution:
    u_p: np.ndarray
    u_s: np.ndarray
    coefficients: np.ndarray
    rank: int
    n_basis: int
    pivots_dropped: int
    meta: dict = field(default_factory=dict)

    @property
    def u_G(self) -> np.ndarray:
        return self.u_p + self.u_s


def pivoted_spd_solve(G: np.ndarray, r: np.ndarray, rel_tol: float = 1e-12) -> tuple[np.ndarray, int]:
    """Solve ``G c = r`` on the span retained by a diagonally pivoted Cholesky factorization.

    Pivots below ``rel_tol * max(diag G)`` end the factorization; the matching
    directions get zero coefficients.  Returns ``(c, rank)``.
    """
    n = G.shape[0]
    if n == 0:
        return np.zeros(0), 0
    dmax = float(np.max(np.diag(G)))
    if not dmax > 0:
        raise ValueError("coarse matrix is numerically zero")
    U, piv, rank, info = lapack.dpstrf(G, tol=rel_tol * dmax, lower=0)
    if info < 0:
        raise ValueError(f"dpstrf failed with info={info}")
    piv = piv[:rank] - 1
    U11 = np.triu(U[:rank, :rank])
    y = sla.solve_triangular(U11, r[piv], trans="T")
    z = sla.solve_triangular(U11, y)
    c = np.zeros(n)
    c[piv] = z
    return c, int(rank)


def coarse_solve(problem: FineProblem, u_p: np.ndarray, C: sp.spmatrix, rel_tol: float = 1e-12) -> GfemSolution:
    """Galerkin correction ``a(u_s, v) = F(v) - a(u_p, v)`` for all ``v`` in span(C)."""
    K = problem.K
    n_basis = C.shape[1]
    if n_basis == 0:
        log.info("empty coarse space; u_G = u_p")
        return GfemSolution(u_p, np.zeros_like(u_p), np.zeros(0), 0, 0, 0)
    G = (C.T @ (K @ C)).toarray()
    G = 0.5 * (G + G.T)
    free = problem.mesh.free_nodes
    resid = problem.F - K @ u_p
    resid_free = np.zeros_like(resid)
    resid_free[free] = resid[free]
    r = np.asarray(C.T @ resid_free).ravel()
    c, rank = pivoted_spd_solve(G, r, rel_tol)
    dropped = n_basis - rank
    if dropped:
        log.info("coarse solve: %d of %d directions dropped as redundant", dropped, n_basis)
    u_s = np.asarray(C @ c).ravel()
    return GfemSolution(u_p, u_s, c, rank, n_basis, dropped)


def relative_energy_error(K: sp.spmatrix, u_h: np.ndarray, u_G: np.ndarray) -> float:
    ref = energy_norm(K, u_h)
    if ref == 0:
        raise ValueError("reference solution has zero energy")
    return energy_norm(K, u_h - u_G) / ref


def h_of_s(s: float) -> float:
    """``1 + s log(s) / (1 - s)`` on [0, 1], continuously extended by 1 at 0 and 0 at 1."""
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"s = {s} outside [0, 1]")
    if s == 0.0:
        return 1.0
    if s == 1.0:
        return 0.0
    return 1.0 + s * np.log(s) / (1.0 - s)


@dataclass
class TheoryBounds:
    rho: float
    h_of_rho: float

    @classmethod
    def from_decomposition(cls, decomp: Decomposition) -> "TheoryBounds":
        return cls(decomp.rho, h_of_s(decomp.rho))


def build_local_spaces(problem: FineProblem, decomp: Decomposition, n_loc: int, s: int | None = None,
                       workers: int = 1) -> list[LocalSpace]:
    """All local spaces; subdomains are independent and may run in a thread pool."""

    def one(i):
        patch = OversampledPatch(problem.mesh, problem.coeff, decomp, i)
        return build_local_space(patch, problem.F, problem.data.q, n_loc, s)

    idx = range(decomp.n_subdomains)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, idx))
    return [one(i) for i in idx]


def solve_msgfem(problem: FineProblem, decomp: Decomposition, n_loc: int, s: int | None = None,
                 workers: int = 1) -> GfemSolution:
    """Full pipeline: local spaces, global gluing and coarse solve."""
    spaces = build_local_spaces(problem, decomp, n_loc, s, workers)
    u_p, C, n_dropped = assemble_global(problem, decomp, spaces)
    sol = coarse_solve(problem, u_p, C)
    sol.meta.update(
        m=decomp.m, ell=decomp.oversample_layers, n_loc=n_loc, s=s, H=decomp.H, H_star=decomp.H_star,
        kappa=decomp.kappa, kappa_star=decomp.kappa_star, dropped_cols=n_dropped,
    )
    return sol
