"""Coefficient fields, source terms and boundary data for the two benchmark problems."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .grid_fem import GridMesh


@dataclass(frozen=True)
class CoefficientField:
    """Scalar coefficient, one value per mesh cell (row-major)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float).ravel()
        if values.size == 0 or not np.all(np.isfinite(values)):
            raise ValueError("coefficient values must be finite and nonempty")
        if values.min() <= 0:
            raise ValueError(f"coefficient not elliptic: min value {values.min():.3e} <= 0")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def alpha(self) -> float:
        return float(self.values.min())

    @property
    def beta(self) -> float:
        return float(self.values.max())

    @property
    def contrast(self) -> float:
        return self.beta / self.alpha


def constant_field(mesh: GridMesh, value: float = 1.0) -> CoefficientField:
    return CoefficientField(np.full(mesh.n_cells, float(value)))


def _cells_per(scale: float, h: float) -> int:
    k = int(round(scale / h))
    if k < 1 or abs(k * h - scale) > 1e-9 * max(scale, h):
        raise ValueError(f"patch scale {scale} is not an integer multiple of h = {h}")
    return k


def random_field(
    mesh: GridMesh,
    seed: int,
    patch_scale: float = 1 / 50,
    value_low: float = 1.0,
    value_high: float = 100.0,
) -> CoefficientField:
    """Piecewise constant log-uniform field on square blocks of side ``patch_scale``.

    Each block draws its value from a Philox stream keyed by ``seed`` with the
    block index as counter, so the field does not depend on traversal order.
    """
    if value_low <= 0:
        raise ValueError("value_low must be positive")
    if value_high < value_low:
        raise ValueError("value_high must be >= value_low")
    bx = _cells_per(patch_scale, mesh.hx)
    by = _cells_per(patch_scale, mesh.hy)
    nbx = -(-mesh.nx // bx)
    nby = -(-mesh.ny // by)
    key = int(seed) & (2**64 - 1)
    u = np.empty(nbx * nby)
    for b in range(u.size):
        rng = np.random.Generator(np.random.Philox(key=key, counter=b))
        u[b] = rng.random()
    block_vals = value_low * (value_high / value_low) ** u
    j, i = np.divmod(np.arange(mesh.n_cells), mesh.nx)
    block = (j // by) * nbx + (i // bx)
    return CoefficientField(block_vals[block])


def high_contrast_value(x1, x2, epsilon: float = 1 / 40):
    return 1e4 - 4.0 + 1e4 * np.sin(
        np.pi / 4 + np.floor(x1 + x2) + np.floor(x1 / epsilon) + np.floor(x2 / epsilon)
    )


def high_contrast_field(mesh: GridMesh, epsilon: float = 1 / 40) -> CoefficientField:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x1, x2 = mesh.cell_centers.T
    return CoefficientField(high_contrast_value(x1, x2, epsilon))


class Example(str, enum.Enum):
    RANDOM_FIELD = "RandomField"
    HIGH_CONTRAST = "HighContrast"


@dataclass(frozen=True)
class ProblemData:
    """Source ``f``, Neumann flux ``g`` and Dirichlet value ``q``; all ``(x, y) -> array``."""

    f: Callable
    g: Callable
    q: Callable


def _const(c):
    return lambda x, y: np.full(np.shape(x), float(c))


def zero_data() -> ProblemData:
    return ProblemData(_const(0.0), _const(0.0), _const(0.0))


def benchmark_problem_data(example) -> ProblemData:
    example = Example(example)
    if example is Example.RANDOM_FIELD:
        def f(x, y):
            return 1e3 * np.exp(-10 * (x - 0.35) ** 2 - 10 * (y - 0.55) ** 2)
    else:
        def f(x, y):
            return 1e4 * np.exp(-10 * (x - 0.5) ** 2 - 10 * (y - 0.5) ** 2)
    return ProblemData(f=f, g=_const(-1.0), q=_const(1.0))


def example_coefficient(example, mesh: GridMesh, seed: int = 0, **kwargs) -> CoefficientField:
    example = Example(example)
    if example is Example.RANDOM_FIELD:
        return random_field(mesh, seed, **kwargs)
    return high_contrast_field(mesh, **kwargs)


def write_coefficient_csv(path, mesh: GridMesh, coeff: CoefficientField) -> Path:
    """Write ``x,y,value`` rows at cell centers."""
    path = Path(path)
    data = np.column_stack([mesh.cell_centers, coeff.values])
    np.savetxt(path, data, delimiter=",", header="x,y,value", comments="", fmt="%.17g")
    return path
