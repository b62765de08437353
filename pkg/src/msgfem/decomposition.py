"""Overlapping box decompositions, oversampling domains and partition-of-unity operators.

Subdomains are axis-aligned boxes of whole cells, ``[i0, i1) x [j0, j1)`` in
cell indices.  Patch-local node vectors use the box's own row-major order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .grid_fem import BoundaryTag, GridMesh

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Subdomain:
    mesh: GridMesh
    i0: int
    i1: int
    j0: int
    j1: int

    @property
    def shape_cells(self) -> tuple[int, int]:
        return self.i1 - self.i0, self.j1 - self.j0

    @property
    def side_lengths(self) -> tuple[float, float]:
        return (self.i1 - self.i0) * self.mesh.hx, (self.j1 - self.j0) * self.mesh.hy

    @cached_property
    def cells(self) -> np.ndarray:
        j, i = np.meshgrid(np.arange(self.j0, self.j1), np.arange(self.i0, self.i1), indexing="ij")
        return self.mesh.cell_index(i.ravel(), j.ravel())

    @cached_property
    def _local_ij(self) -> tuple[np.ndarray, np.ndarray]:
        j, i = np.meshgrid(np.arange(self.j0, self.j1 + 1), np.arange(self.i0, self.i1 + 1), indexing="ij")
        return i.ravel(), j.ravel()

    @cached_property
    def nodes(self) -> np.ndarray:
        """Global ids of all nodes in the closed box, patch row-major order."""
        return self.mesh.node_index(*self._local_ij)

    @property
    def n_nodes(self) -> int:
        return self.nodes.size

    @cached_property
    def interface_mask(self) -> np.ndarray:
        """Nodes on box sides that lie inside the domain (where hat supports leave the box)."""
        i, j = self._local_ij
        m = self.mesh
        return (
            ((i == self.i0) & (self.i0 > 0))
            | ((i == self.i1) & (self.i1 < m.nx))
            | ((j == self.j0) & (self.j0 > 0))
            | ((j == self.j1) & (self.j1 < m.ny))
        )

    @cached_property
    def dirichlet_mask(self) -> np.ndarray:
        return self.mesh.boundary_tags[self.nodes] == BoundaryTag.DIRICHLET

    @cached_property
    def neumann_mask(self) -> np.ndarray:
        tags = self.mesh.boundary_tags[self.nodes]
        return (tags == BoundaryTag.NEUMANN) & ~self.interface_mask

    @cached_property
    def internal_mask(self) -> np.ndarray:
        """Nodes whose hat function is supported in the closed box."""
        return ~self.interface_mask

    @cached_property
    def internal_dofs(self) -> np.ndarray:
        return self.nodes[self.internal_mask]

    @cached_property
    def eligible_mask(self) -> np.ndarray:
        """Nodes carrying trial dofs (Dirichlet nodes eliminated)."""
        return ~self.dirichlet_mask

    @cached_property
    def interior_mask(self) -> np.ndarray:
        """Dofs of functions vanishing on the interface and on the Dirichlet boundary."""
        return self.internal_mask & ~self.dirichlet_mask

    @cached_property
    def gamma_mask(self) -> np.ndarray:
        """Interface nodes that carry trial dofs."""
        return self.interface_mask & ~self.dirichlet_mask

    @property
    def touches_dirichlet(self) -> bool:
        return bool(self.dirichlet_mask.any())

    @property
    def touches_boundary(self) -> bool:
        m = self.mesh
        return self.i0 == 0 or self.j0 == 0 or self.i1 == m.nx or self.j1 == m.ny

    def interface_edges(self) -> np.ndarray:
        """Global node pairs of edges on the box sides interior to the domain."""
        m = self.mesh
        parts = []
        ii = np.arange(self.i0, self.i1)
        jj = np.arange(self.j0, self.j1)
        if self.j0 > 0:
            parts.append(np.column_stack([m.node_index(ii, self.j0), m.node_index(ii + 1, self.j0)]))
        if self.j1 < m.ny:
            parts.append(np.column_stack([m.node_index(ii, self.j1), m.node_index(ii + 1, self.j1)]))
        if self.i0 > 0:
            parts.append(np.column_stack([m.node_index(self.i0, jj), m.node_index(self.i0, jj + 1)]))
        if self.i1 < m.nx:
            parts.append(np.column_stack([m.node_index(self.i1, jj), m.node_index(self.i1, jj + 1)]))
        if not parts:
            return np.zeros((0, 2), dtype=np.int64)
        return np.vstack(parts)

    def local_index(self, global_nodes: np.ndarray) -> np.ndarray:
        """Patch-local positions of global node ids lying in the box."""
        i, j = self.mesh.node_ij
        gi, gj = i[global_nodes], j[global_nodes]
        if np.any((gi < self.i0) | (gi > self.i1) | (gj < self.j0) | (gj > self.j1)):
            raise ValueError("node outside subdomain")
        return (gj - self.j0) * (self.i1 - self.i0 + 1) + (gi - self.i0)

    def dilate(self, layers: int) -> "Subdomain":
        m = self.mesh
        return Subdomain(
            m,
            max(self.i0 - layers, 0),
            min(self.i1 + layers, m.nx),
            max(self.j0 - layers, 0),
            min(self.j1 + layers, m.ny),
        )

    def contains(self, other: "Subdomain") -> bool:
        return self.i0 <= other.i0 and self.j0 <= other.j0 and self.i1 >= other.i1 and self.j1 >= other.j1


@dataclass(frozen=True, eq=False)
class PUOperator:
    """Diagonal weights ``1/mu_k`` on the internal dofs of one subdomain, zero elsewhere."""

    index: int
    weights: np.ndarray  # patch-local, length = subdomain node count


def _block_bounds(n: int, m: int) -> list[tuple[int, int]]:
    size = -(-n // m)
    bounds = [(b * size, min((b + 1) * size, n)) for b in range(m)]
    if any(lo >= hi for lo, hi in bounds):
        raise ValueError(f"{m} blocks of size {size} leave an empty block on {n} cells")
    return bounds


@dataclass(eq=False)
class Decomposition:
    mesh: GridMesh
    m: int
    overlap_layers: int
    oversample_layers: int
    block: int
    subdomains: list[Subdomain]
    oversampled: list[Subdomain]

    @property
    def n_subdomains(self) -> int:
        return len(self.subdomains)

    @cached_property
    def multiplicity(self) -> np.ndarray:
        """Number of subdomains in which each node is an internal dof."""
        mu = np.zeros(self.mesh.n_nodes, dtype=np.int64)
        for sub in self.subdomains:
            np.add.at(mu, sub.internal_dofs, 1)
        return mu

    @cached_property
    def pu_operators(self) -> list[PUOperator]:
        mu = self.multiplicity
        ops = []
        for j, sub in enumerate(self.subdomains):
            w = np.zeros(sub.n_nodes)
            w[sub.internal_mask] = 1.0 / mu[sub.internal_dofs]
            w.setflags(write=False)
            ops.append(PUOperator(j, w))
        return ops

    @staticmethod
    def _cell_overlap_count(mesh, subs) -> np.ndarray:
        count = np.zeros((mesh.ny, mesh.nx), dtype=np.int64)
        for s in subs:
            count[s.j0:s.j1, s.i0:s.i1] += 1
        return count

    @cached_property
    def kappa(self) -> int:
        return int(self._cell_overlap_count(self.mesh, self.subdomains).max())

    @cached_property
    def kappa_star(self) -> int:
        return int(self._cell_overlap_count(self.mesh, self.oversampled).max())

    @property
    def H(self) -> float:
        """Nominal subdomain side: (block + 2 overlap) h."""
        return (self.block + 2 * self.overlap_layers) * self.mesh.h

    @property
    def H_star(self) -> float:
        return self.H + 2 * self.oversample_layers * self.mesh.h

    @property
    def rho(self) -> float:
        return self.H / self.H_star


def build_decomposition(mesh: GridMesh, m: int, overlap_layers: int = 2, oversample_layers: int = 0) -> Decomposition:
    """Split the mesh into ``m x m`` boxes, grow each by ``overlap_layers`` cells,
    then by ``oversample_layers`` more for the oversampling domains (clipped to the domain)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if m > mesh.nx or m > mesh.ny:
        raise ValueError(f"m = {m} exceeds the number of cells per direction")
    if overlap_layers < 1:
        raise ValueError("overlap_layers must be >= 1")
    if oversample_layers < 0:
        raise ValueError("oversample_layers must be >= 0")
    bx = _block_bounds(mesh.nx, m)
    by = _block_bounds(mesh.ny, m)
    subs, stars = [], []
    for j0, j1 in by:
        for i0, i1 in bx:
            core = Subdomain(mesh, i0, i1, j0, j1)
            sub = core.dilate(overlap_layers)
            subs.append(sub)
            stars.append(sub.dilate(oversample_layers))
    return Decomposition(mesh, m, overlap_layers, oversample_layers, -(-mesh.nx // m), subs, stars)


def pu_apply(pu: PUOperator, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    if v.shape[0] != pu.weights.shape[0]:
        raise ValueError(f"vector has {v.shape[0]} entries, subdomain has {pu.weights.shape[0]} nodes")
    return pu.weights.reshape((-1,) + (1,) * (v.ndim - 1)) * v


def zero_extend(decomp: Decomposition, j: int, v: np.ndarray, tol: float = 1e-14) -> np.ndarray:
    """Extend a patch vector supported on the internal dofs of subdomain ``j`` by zero."""
    sub = decomp.subdomains[j]
    v = np.asarray(v, dtype=float)
    if v.shape[0] != sub.n_nodes:
        raise ValueError(f"vector has {v.shape[0]} entries, subdomain has {sub.n_nodes} nodes")
    outside = v[~sub.internal_mask]
    if outside.size and np.max(np.abs(outside)) >= tol:
        raise ValueError("vector is not supported on the internal dofs of the subdomain")
    out = np.zeros((decomp.mesh.n_nodes,) + v.shape[1:])
    out[sub.internal_dofs] = v[sub.internal_mask]
    return out


def restrict(decomp: Decomposition, j: int, v: np.ndarray) -> np.ndarray:
    return np.asarray(v)[decomp.subdomains[j].nodes]


def reconstruct(decomp: Decomposition, v: np.ndarray) -> np.ndarray:
    """``sum_j R_j^T Xi_j(v|omega_j)``; equals ``v`` for every nodal vector."""
    out = np.zeros_like(np.asarray(v, dtype=float))
    for j, pu in enumerate(decomp.pu_operators):
        out += zero_extend(decomp, j, pu_apply(pu, restrict(decomp, j, v)))
    return out


def write_decomposition_csv(path, decomp: Decomposition) -> Path:
    path = Path(path)
    lines = ["index,kind,i0,i1,j0,j1,x0,x1,y0,y1,n_nodes,n_internal,n_interface"]
    m = decomp.mesh
    for kind, subs in (("omega", decomp.subdomains), ("omega_star", decomp.oversampled)):
        for idx, s in enumerate(subs):
            lines.append(
                f"{idx},{kind},{s.i0},{s.i1},{s.j0},{s.j1},"
                f"{s.i0 * m.hx:.6g},{s.i1 * m.hx:.6g},{s.j0 * m.hy:.6g},{s.j1 * m.hy:.6g},"
                f"{s.n_nodes},{int(s.internal_mask.sum())},{int(s.interface_mask.sum())}"
            )
    path.write_text("\n".join(lines) + "\n")
    return path
