"""Per-subdomain constructions on the oversampling domains.

For subdomain ``i`` everything is computed on the box ``omega_i*`` with its own
patch-local node numbering.  Three node classes partition that box:

* ``interior``: dofs vanishing on the interface and on the Dirichlet boundary,
* ``gamma``: interface nodes (box sides inside the domain) that carry dofs,
* ``dirichlet``: nodes on x = 0 or x = 1, eliminated from all trial spaces.

Discrete A-harmonic functions are determined by their values on ``gamma``; the
Steklov problem is posed there through the Schur complement of the patch
stiffness.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .decomposition import Decomposition, Subdomain
from .grid_fem import GridMesh, assemble_boundary_mass, assemble_patch_stiffness
from .linalg import SpdFactorization, schur_complement, sym_gevp

log = logging.getLogger(__name__)


class LocalSpaceWarning(UserWarning):
    pass


@dataclass
class HarmonicBasis:
    """Steklov eigenfunctions spanning (part of) the discrete A-harmonic space on ``omega_i*``."""

    index: int
    vectors: np.ndarray  # patch-local on omega_i*, one column per function
    eigenvalues: np.ndarray
    dimension: int  # dim W_h(omega_i*) = number of interface dofs

    @property
    def count(self) -> int:
        return self.vectors.shape[1]

    def truncate(self, s: int) -> "HarmonicBasis":
        """First ``s`` Steklov functions; the spans are nested in ``s``."""
        s = min(int(s), self.count)
        return HarmonicBasis(self.index, self.vectors[:, :s], self.eigenvalues[:s], self.dimension)


@dataclass
class LocalSpace:
    index: int
    particular: np.ndarray  # patch-local on omega_i*
    basis: np.ndarray  # patch-local on omega_i*, columns phi_1..phi_n
    eigenvalues: np.ndarray  # lam_1..lam_{n+1} when available
    touches_dirichlet: bool
    s_used: int
    dimension: int

    @property
    def n_loc(self) -> int:
        return self.basis.shape[1]

    def truncate(self, n_loc: int) -> "LocalSpace":
        n_loc = min(int(n_loc), self.n_loc)
        return LocalSpace(self.index, self.particular, self.basis[:, :n_loc],
                          self.eigenvalues[: n_loc + 1], self.touches_dirichlet, self.s_used, self.dimension)


class OversampledPatch:
    """Local operators for one subdomain and its oversampling domain."""

    def __init__(self, mesh: GridMesh, coeff, decomp: Decomposition, index: int):
        self.mesh = mesh
        self.coeff = coeff
        self.index = index
        self.sub: Subdomain = decomp.subdomains[index]
        self.star: Subdomain = decomp.oversampled[index]
        self.pu_weights = decomp.pu_operators[index].weights
        star = self.star
        self.K = assemble_patch_stiffness(mesh, coeff, star.i0, star.i1, star.j0, star.j1)
        self.interior = np.flatnonzero(star.interior_mask)
        self.gamma = np.flatnonzero(star.gamma_mask)
        self.dirichlet = np.flatnonzero(star.dirichlet_mask)
        self.eligible = np.flatnonzero(star.eligible_mask)
        self.sub_in_star = star.local_index(self.sub.nodes)

    @property
    def touches_dirichlet(self) -> bool:
        return self.dirichlet.size > 0

    @property
    def harmonic_dimension(self) -> int:
        return self.gamma.size

    @cached_property
    def interior_factor(self) -> SpdFactorization:
        return SpdFactorization(self.K[self.interior][:, self.interior])

    @cached_property
    def K_omega(self) -> sp.csr_matrix:
        """Stiffness integrated over the cells of ``omega_i`` only."""
        s = self.sub
        return assemble_patch_stiffness(self.mesh, self.coeff, s.i0, s.i1, s.j0, s.j1)

    @cached_property
    def interface_mass(self) -> np.ndarray:
        """Edge mass on the interface, restricted to the ``gamma`` dofs."""
        M = assemble_boundary_mass(self.mesh, self.star.interface_edges())
        g = self.star.nodes[self.gamma]
        return M[g][:, g].toarray()

    def to_global(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros((self.mesh.n_nodes,) + v.shape[1:])
        out[self.star.nodes] = v
        return out

    def harmonicity_residual(self, u: np.ndarray) -> np.ndarray:
        """``a_{omega*}(u, phi_k)`` for every interior hat ``phi_k``, one column per input column."""
        return (self.K @ u)[self.interior]

    def harmonicity_ratio(self, U: np.ndarray) -> np.ndarray:
        """Worst ``|a(u, phi_k)| / (|u|_a |phi_k|_a)`` over interior hats, per column of ``U``.

        ``u^T K u`` is only resolved to about ``eps * |u|^T |K| |u|``.  When the
        computed energy is below ``64 eps`` times that scale (the constant
        Steklov mode), ``|u|_a`` is replaced by ``sqrt(|u|^T |K| |u|)``.
        """
        U = np.atleast_2d(U.T).T
        KU = self.K @ U
        energy = np.einsum("ij,ij->j", U, KU)
        scale = np.einsum("ij,ij->j", np.abs(U), abs(self.K) @ np.abs(U))
        resolved = energy > 64 * np.finfo(float).eps * scale
        u_a = np.sqrt(np.where(resolved, energy, scale))
        hat_a = np.sqrt(self.K.diagonal()[self.interior])
        if hat_a.size == 0:
            return np.zeros(U.shape[1])
        ratio = np.abs(KU[self.interior]) / (hat_a[:, None] * np.where(u_a > 0, u_a, 1.0)[None, :])
        return ratio.max(axis=0)

    def pu_image(self, u: np.ndarray) -> np.ndarray:
        """``Xi_i(u|omega_i)`` on the nodes of ``omega_i`` (patch-local to omega_i)."""
        w = self.pu_weights
        return w.reshape((-1,) + (1,) * (u.ndim - 1)) * u[self.sub_in_star]


def particular_function(patch: OversampledPatch, F: np.ndarray, q) -> np.ndarray:
    """Local particular function ``psi_r + psi_d`` on ``omega_i*`` (patch-local).

    ``psi_r`` solves the source problem with zero data on the interface and on
    the Dirichlet boundary; ``psi_d`` is the discrete A-harmonic lift of ``q``
    with natural conditions on the interface.  ``F`` is the global load vector;
    its rows at interior dofs coincide with the local load.
    """
    star = patch.star
    u = np.zeros(star.n_nodes)
    if patch.interior.size:
        u[patch.interior] = patch.interior_factor.solve(F[star.nodes[patch.interior]])
    if patch.touches_dirichlet:
        x, y = patch.mesh.coords[star.nodes[patch.dirichlet]].T
        qd = np.broadcast_to(np.asarray(q(x, y), dtype=float), x.shape)
        if np.any(qd != 0):
            E, D = patch.eligible, patch.dirichlet
            K_EE = patch.K[E][:, E]
            rhs = -(patch.K[E][:, D] @ qd)
            lift = SpdFactorization(K_EE).solve(rhs)
            u[E] += lift
            u[D] = qd
    return u


def steklov_basis(patch: OversampledPatch, s: int) -> HarmonicBasis:
    """The ``s`` lowest Steklov eigenfunctions, A-harmonically extended into ``omega_i*``.

    The eigenproblem is the Schur complement of the patch stiffness on the
    interface dofs against the interface edge mass; eigenvectors are
    orthonormal in that mass.  ``s`` is clamped to the harmonic dimension.
    """
    if s <= 0:
        raise ValueError("s must be positive")
    dim = patch.harmonic_dimension
    if s > dim:
        warnings.warn(f"subdomain {patch.index}: s = {s} clamped to dim W_h = {dim}", LocalSpaceWarning,
                      stacklevel=2)
        s = dim
    n = patch.star.n_nodes
    if dim == 0:
        return HarmonicBasis(patch.index, np.zeros((n, 0)), np.zeros(0), 0)
    factor = patch.interior_factor if patch.interior.size else None
    S, X = schur_complement(patch.K, patch.interior, patch.gamma, factor)
    res = sym_gevp(S, patch.interface_mass, n=s)
    g = res.vectors
    U = np.zeros((n, g.shape[1]))
    U[patch.gamma] = g
    if patch.interior.size:
        U[patch.interior] = -(X @ g)
    return HarmonicBasis(patch.index, U, res.values, dim)


def local_spectral_basis(patch: OversampledPatch, harm: HarmonicBasis, n_loc: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvectors of ``a_{omega*}(phi, v) = lam a_{omega}(Xi phi, Xi v)`` over the harmonic basis.

    Returns the ``n_loc`` lowest eigenfunctions (patch-local columns) and the
    eigenvalues ``lam_1..lam_{n_loc+1}`` (fewer if the space is exhausted).
    """
    if n_loc < 0:
        raise ValueError("n_loc must be nonnegative")
    if harm.count == 0:
        return np.zeros((patch.star.n_nodes, 0)), np.zeros(0)
    if n_loc + 1 > harm.count:
        warnings.warn(f"subdomain {patch.index}: n_loc + 1 = {n_loc + 1} exceeds {harm.count} harmonic functions",
                      LocalSpaceWarning, stacklevel=2)
    U = harm.vectors
    A_hat = U.T @ (patch.K @ U)
    XU = patch.pu_image(U)
    B_hat = XU.T @ (patch.K_omega @ XU)
    res = sym_gevp(A_hat, B_hat, n=n_loc + 1)
    phi = U @ res.vectors[:, :n_loc]
    return phi, res.values


def build_local_space(patch: OversampledPatch, F: np.ndarray, q, n_loc: int, s: int | None = None,
                      harm: HarmonicBasis | None = None) -> LocalSpace:
    """Particular function plus optimal spectral basis for one subdomain."""
    if s is None:
        s = max(4 * n_loc, 40)
    if harm is None:
        harm = steklov_basis(patch, s)
    elif harm.count > s:
        harm = harm.truncate(s)
    phi, lam = local_spectral_basis(patch, harm, n_loc)
    return LocalSpace(
        index=patch.index,
        particular=particular_function(patch, F, q),
        basis=phi,
        eigenvalues=lam,
        touches_dirichlet=patch.touches_dirichlet,
        s_used=harm.count,
        dimension=harm.dimension,
    )


def nwidth_estimate(space: LocalSpace, n: int) -> float:
    """``lam_{n+1}^{-1/2}``: the local n-width of the PU operator on the computed space."""
    if n < 0 or n >= space.eigenvalues.size:
        raise IndexError(f"n = {n} out of range for {space.eigenvalues.size} stored eigenvalues")
    lam = float(space.eigenvalues[n])
    return float("inf") if lam <= 1e-14 else lam ** -0.5


def write_diagnostics_csv(path, spaces: list[LocalSpace]) -> None:
    width = max((sp_.eigenvalues.size for sp_ in spaces), default=0)
    header = ["i", "N_i", "s_used"] + [f"lambda_{k + 1}" for k in range(width)] + ["nwidth_estimate"]
    lines = [",".join(header)]
    for sp_ in spaces:
        lam = [f"{v:.17g}" for v in sp_.eigenvalues] + [""] * (width - sp_.eigenvalues.size)
        nw = nwidth_estimate(sp_, sp_.n_loc) if sp_.n_loc < sp_.eigenvalues.size else float("nan")
        lines.append(",".join([str(sp_.index), str(sp_.dimension), str(sp_.s_used)] + lam + [f"{nw:.17g}"]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
