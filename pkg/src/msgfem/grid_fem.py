"""Q1 finite elements on a uniform Cartesian grid over the unit square.

Nodes and cells are numbered row-major (x fastest).  Local node order inside a
cell is counterclockwise from the lower-left corner.  The left/right sides
(x = 0, x = 1) carry Dirichlet data, the bottom/top sides (y = 0, y = 1)
carry Neumann data; corner nodes count as Dirichlet.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

GAUSS2_POINTS = np.array([-1.0, 1.0]) / np.sqrt(3.0)
GAUSS2_WEIGHTS = np.array([1.0, 1.0])


class BoundaryTag(enum.IntEnum):
    INTERIOR = 0
    DIRICHLET = 1  # x = 0 or x = 1
    NEUMANN = 2  # y = 0 or y = 1, corners excluded


@dataclass(frozen=True)
class GridMesh:
    """Uniform ``nx`` x ``ny`` cell grid on [0, 1]^2."""

    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"need at least 2 cells per direction, got ({self.nx}, {self.ny})")

    @property
    def hx(self) -> float:
        return 1.0 / self.nx

    @property
    def hy(self) -> float:
        return 1.0 / self.ny

    @property
    def h(self) -> float:
        return self.hx

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def node_index(self, i, j):
        return np.asarray(j) * (self.nx + 1) + np.asarray(i)

    def cell_index(self, i, j):
        return np.asarray(j) * self.nx + np.asarray(i)

    @cached_property
    def node_ij(self) -> tuple[np.ndarray, np.ndarray]:
        j, i = np.divmod(np.arange(self.n_nodes), self.nx + 1)
        return i, j

    @cached_property
    def coords(self) -> np.ndarray:
        i, j = self.node_ij
        return np.column_stack([i * self.hx, j * self.hy])

    @cached_property
    def cell_centers(self) -> np.ndarray:
        j, i = np.divmod(np.arange(self.n_cells), self.nx)
        return np.column_stack([(i + 0.5) * self.hx, (j + 0.5) * self.hy])

    @cached_property
    def cells(self) -> np.ndarray:
        """(n_cells, 4) node indices, counterclockwise from lower-left."""
        j, i = np.divmod(np.arange(self.n_cells), self.nx)
        n0 = self.node_index(i, j)
        return np.column_stack([n0, n0 + 1, n0 + self.nx + 2, n0 + self.nx + 1])

    @cached_property
    def boundary_tags(self) -> np.ndarray:
        i, j = self.node_ij
        tags = np.full(self.n_nodes, BoundaryTag.INTERIOR, dtype=np.int8)
        tags[(j == 0) | (j == self.ny)] = BoundaryTag.NEUMANN
        tags[(i == 0) | (i == self.nx)] = BoundaryTag.DIRICHLET
        return tags

    @cached_property
    def dirichlet_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_tags == BoundaryTag.DIRICHLET)

    @cached_property
    def free_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_tags != BoundaryTag.DIRICHLET)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_tags != BoundaryTag.INTERIOR)

    def neumann_edges(self) -> np.ndarray:
        """Edges on y = 0 and y = 1 as (n_edges, 2) node pairs."""
        i = np.arange(self.nx)
        bottom = np.column_stack([self.node_index(i, 0), self.node_index(i + 1, 0)])
        top = np.column_stack([self.node_index(i, self.ny), self.node_index(i + 1, self.ny)])
        return np.vstack([bottom, top])

    def dirichlet_edges(self) -> np.ndarray:
        j = np.arange(self.ny)
        left = np.column_stack([self.node_index(0, j), self.node_index(0, j + 1)])
        right = np.column_stack([self.node_index(self.nx, j), self.node_index(self.nx, j + 1)])
        return np.vstack([left, right])

    def boundary_edges(self) -> np.ndarray:
        return np.vstack([self.neumann_edges(), self.dirichlet_edges()])


def build_mesh(n_cells_x: int, n_cells_y: int) -> GridMesh:
    return GridMesh(int(n_cells_x), int(n_cells_y))


def q1_element_stiffness(hx: float, hy: float) -> np.ndarray:
    """Exact Q1 stiffness of an hx x hy rectangle for unit coefficient."""
    kx = np.array([[2, -2, -1, 1], [-2, 2, 1, -1], [-1, 1, 2, -2], [1, -1, -2, 2]], dtype=float)
    ky = np.array([[2, 1, -1, -2], [1, 2, -2, -1], [-1, -2, 2, 1], [-2, -1, 1, 2]], dtype=float)
    return (hy / hx) * kx / 6.0 + (hx / hy) * ky / 6.0


def _grid_cells(nx: int, ny: int) -> np.ndarray:
    j, i = np.divmod(np.arange(nx * ny), nx)
    n0 = j * (nx + 1) + i
    return np.column_stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1])


def assemble_grid_stiffness(nx: int, ny: int, hx: float, hy: float, values: np.ndarray) -> sp.csr_matrix:
    """Stiffness of an ``nx`` x ``ny`` block of cells with element-constant coefficient.

    ``values`` is row-major over the block's cells; the result uses the block's
    own row-major node numbering.
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.size != nx * ny:
        raise ValueError(f"expected {nx * ny} coefficient values, got {values.size}")
    if np.any(values <= 0):
        raise ValueError("coefficient must be strictly positive on every element")
    cells = _grid_cells(nx, ny)
    ke = q1_element_stiffness(hx, hy)
    rows = np.repeat(cells, 4, axis=1).ravel()
    cols = np.tile(cells, (1, 4)).ravel()
    data = (values[:, None] * ke.ravel()[None, :]).ravel()
    n = (nx + 1) * (ny + 1)
    K = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    K.sum_duplicates()
    K.eliminate_zeros()
    return K


def assemble_stiffness(mesh: GridMesh, coeff) -> sp.csr_matrix:
    """Global stiffness ``a(u, v) = int A grad u . grad v`` with no rows eliminated."""
    values = getattr(coeff, "values", coeff)
    return assemble_grid_stiffness(mesh.nx, mesh.ny, mesh.hx, mesh.hy, values)


def assemble_patch_stiffness(mesh: GridMesh, coeff, i0: int, i1: int, j0: int, j1: int) -> sp.csr_matrix:
    """Stiffness restricted to cells [i0, i1) x [j0, j1), numbered on the patch nodes."""
    values = np.asarray(getattr(coeff, "values", coeff)).reshape(mesh.ny, mesh.nx)
    return assemble_grid_stiffness(i1 - i0, j1 - j0, mesh.hx, mesh.hy, values[j0:j1, i0:i1])


def _edge_lengths(mesh: GridMesh, edges: np.ndarray) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= mesh.n_nodes):
        raise ValueError("edge references a node outside the mesh")
    ia, ja = mesh.node_ij[0][edges[:, 0]], mesh.node_ij[1][edges[:, 0]]
    ib, jb = mesh.node_ij[0][edges[:, 1]], mesh.node_ij[1][edges[:, 1]]
    di, dj = np.abs(ib - ia), np.abs(jb - ja)
    if np.any(di + dj != 1):
        raise ValueError("edge set contains pairs that are not mesh edges")
    return np.where(di == 1, mesh.hx, mesh.hy)


def assemble_boundary_mass(mesh: GridMesh, edges) -> sp.csr_matrix:
    """Linear edge mass ``int phi_a phi_b ds`` summed over the given edges."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    n = mesh.n_nodes
    if edges.shape[0] == 0:
        return sp.csr_matrix((n, n))
    length = _edge_lengths(mesh, edges)
    block = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    rows = np.repeat(edges, 2, axis=1).ravel()
    cols = np.tile(edges, (1, 2)).ravel()
    data = (length[:, None] * block.ravel()[None, :]).ravel()
    M = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    M.sum_duplicates()
    M.eliminate_zeros()
    return M


def assemble_load(mesh: GridMesh, f, g=None) -> np.ndarray:
    """Load vector ``int f phi_k + int_{Neumann} g phi_k``.

    ``f`` and ``g`` are vectorised callables ``(x, y) -> values``; 2x2 Gauss per
    cell and 2-point Gauss per Neumann edge.
    """
    F = np.zeros(mesh.n_nodes)
    cells = mesh.cells
    x0 = mesh.coords[cells[:, 0]]
    hx, hy = mesh.hx, mesh.hy
    ref = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    for a, wa in zip(GAUSS2_POINTS, GAUSS2_WEIGHTS):
        for b, wb in zip(GAUSS2_POINTS, GAUSS2_WEIGHTS):
            xq = x0[:, 0] + 0.5 * (a + 1) * hx
            yq = x0[:, 1] + 0.5 * (b + 1) * hy
            fq = np.broadcast_to(np.asarray(f(xq, yq), dtype=float), xq.shape)
            w = wa * wb * hx * hy / 4.0
            for loc, (sa, sb) in enumerate(ref):
                shape = 0.25 * (1 + sa * a) * (1 + sb * b)
                np.add.at(F, cells[:, loc], w * fq * shape)
    if g is not None:
        edges = mesh.neumann_edges()
        pa, pb = mesh.coords[edges[:, 0]], mesh.coords[edges[:, 1]]
        length = _edge_lengths(mesh, edges)
        for t, wt in zip(GAUSS2_POINTS, GAUSS2_WEIGHTS):
            s = 0.5 * (t + 1)
            xq = (1 - s) * pa + s * pb
            gq = np.broadcast_to(np.asarray(g(xq[:, 0], xq[:, 1]), dtype=float), (edges.shape[0],))
            w = 0.5 * wt * length
            np.add.at(F, edges[:, 0], w * gq * (1 - s))
            np.add.at(F, edges[:, 1], w * gq * s)
    return F


def energy_norm(K: sp.spmatrix, u: np.ndarray) -> float:
    """``sqrt(u^T K u)`` with round-off negatives clamped to zero."""
    u = np.asarray(u, dtype=float)
    if u.shape[0] != K.shape[0]:
        raise ValueError(f"dimension mismatch: K is {K.shape}, u has {u.shape[0]} entries")
    val = float(u @ (K @ u))
    if val < 0:
        scale = abs(K).max() * float(u @ u) if K.nnz else 0.0
        if val < -1e-12 * scale:
            raise ValueError(f"negative energy {val:.3e}: matrix is not positive semidefinite")
        return 0.0
    return float(np.sqrt(val))


def energy_error_exact(mesh: GridMesh, coeff, u_h: np.ndarray, grad_exact, order: int = 3) -> float:
    """Energy-norm distance between a Q1 field and an exact solution given by its gradient.

    Uses ``order`` x ``order`` Gauss quadrature per cell, so it measures the true
    discretisation error rather than the interpolant distance.
    """
    pts, wts = np.polynomial.legendre.leggauss(order)
    values = np.asarray(getattr(coeff, "values", coeff), dtype=float).ravel()
    cells = mesh.cells
    ue = u_h[cells]
    x0 = mesh.coords[cells[:, 0]]
    hx, hy = mesh.hx, mesh.hy
    total = 0.0
    for a, wa in zip(pts, wts):
        for b, wb in zip(pts, wts):
            s, t = 0.5 * (a + 1), 0.5 * (b + 1)
            dx = ((ue[:, 1] - ue[:, 0]) * (1 - t) + (ue[:, 2] - ue[:, 3]) * t) / hx
            dy = ((ue[:, 3] - ue[:, 0]) * (1 - s) + (ue[:, 2] - ue[:, 1]) * s) / hy
            gx, gy = grad_exact(x0[:, 0] + s * hx, x0[:, 1] + t * hy)
            w = wa * wb * hx * hy / 4.0
            total += float(np.sum(w * values * ((gx - dx) ** 2 + (gy - dy) ** 2)))
    return float(np.sqrt(total))


def interpolate(mesh: GridMesh, func) -> np.ndarray:
    x, y = mesh.coords.T
    return np.broadcast_to(np.asarray(func(x, y), dtype=float), x.shape).copy()


def write_nodal_csv(path, mesh: GridMesh, values: np.ndarray) -> Path:
    """Write ``x,y,value`` rows, one per node."""
    path = Path(path)
    data = np.column_stack([mesh.coords, np.asarray(values, dtype=float)])
    np.savetxt(path, data, delimiter=",", header="x,y,value", comments="", fmt="%.17g")
    return path


def read_nodal_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1)
