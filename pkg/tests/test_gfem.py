import dataclasses
import warnings

import numpy as np
import pytest

from msgfem.coefficients import (ProblemData, benchmark_problem_data, constant_field, random_field,
                                 zero_data)
from msgfem.decomposition import build_decomposition
from msgfem.gfem import (FineProblem, TheoryBounds, assemble_global, build_local_spaces, coarse_solve, h_of_s,
                         pivoted_spd_solve, reference_solve, relative_energy_error, solve_msgfem)
from msgfem.grid_fem import build_mesh, energy_norm
from msgfem.local_spaces import LocalSpaceWarning


@pytest.fixture(scope="module")
def rf_problem():
    mesh = build_mesh(50, 50)
    prob = FineProblem.assemble(mesh, random_field(mesh, seed=2), benchmark_problem_data("RandomField"))
    return prob, reference_solve(prob)


@pytest.fixture(scope="module")
def rf_solution(rf_problem):
    prob, _ = rf_problem
    decomp = build_decomposition(prob.mesh, 3, 2, 3)
    spaces = build_local_spaces(prob, decomp, n_loc=6, s=30)
    u_p, C, dropped = assemble_global(prob, decomp, spaces)
    return decomp, spaces, u_p, C, dropped, coarse_solve(prob, u_p, C)


def test_reference_constant_solution():
    mesh = build_mesh(12, 9)
    data = ProblemData(f=zero_data().f, g=zero_data().g, q=lambda x, y: np.ones_like(x))
    u = reference_solve(FineProblem.assemble(mesh, random_field(mesh, 0, patch_scale=1 / 3), data))
    np.testing.assert_allclose(u, 1.0, atol=1e-10)


@pytest.mark.parametrize("example,expected", [("RandomField", 31.690574291385385),
                                              ("HighContrast", 14.425891057393665)])
def test_reference_energy_baseline(example, expected):
    from msgfem.coefficients import example_coefficient

    mesh = build_mesh(100, 100)
    prob = FineProblem.assemble(mesh, example_coefficient(example, mesh, seed=0), benchmark_problem_data(example))
    assert energy_norm(prob.K, reference_solve(prob)) == pytest.approx(expected, rel=1e-10)


def test_relative_energy_error_cases(rf_problem, rng):
    prob, u_h = rf_problem
    K = prob.K
    assert relative_energy_error(K, u_h, u_h) == 0.0
    assert relative_energy_error(K, u_h, np.zeros_like(u_h)) == pytest.approx(1.0, rel=1e-14)
    d = rng.standard_normal(u_h.size)
    d *= 0.1 * energy_norm(K, u_h) / energy_norm(K, d)
    assert relative_energy_error(K, u_h, u_h + d) == pytest.approx(0.1, rel=1e-12)
    with pytest.raises(ValueError):
        relative_energy_error(K, np.ones_like(u_h), u_h)


def test_coarse_basis_bookkeeping(rf_problem, rf_solution):
    prob, _ = rf_problem
    decomp, spaces, u_p, C, dropped, _ = rf_solution
    assert C.shape[1] == sum(s.n_loc for s in spaces) - dropped
    # every column is supported on the internal dofs of one subdomain and vanishes on the Dirichlet nodes
    col = 0
    for sub, space in zip(decomp.subdomains, spaces):
        block = C[:, col:col + space.n_loc].toarray()
        outside = np.ones(prob.mesh.n_nodes, bool)
        outside[sub.internal_dofs] = False
        assert not block[outside].any()
        col += space.n_loc
    assert not C[prob.mesh.dirichlet_nodes].toarray().any()


def test_zero_particular_functions(rf_problem, rf_solution):
    prob, _ = rf_problem
    decomp, spaces, *_ = rf_solution
    zeroed = [dataclasses.replace(s, particular=np.zeros_like(s.particular)) for s in spaces]
    u_p, _, _ = assemble_global(prob, decomp, zeroed)
    assert not u_p.any()
    with pytest.raises(ValueError):
        assemble_global(prob, decomp, spaces[:-1])


def test_galerkin_orthogonality(rf_problem, rf_solution, rng):
    prob, u_h = rf_problem
    *_, C, _, sol = rf_solution
    K = prob.K
    e = u_h - sol.u_G
    ne = energy_norm(K, e)
    assert ne > 0
    for _ in range(20):
        v = C @ rng.standard_normal(C.shape[1])
        assert abs(e @ (K @ v)) <= 1e-8 * ne * energy_norm(K, v)


def test_energy_error_identity(rf_problem, rf_solution):
    prob, u_h = rf_problem
    *_, sol = rf_solution
    K = prob.K
    lhs = energy_norm(K, u_h - sol.u_G) ** 2
    d = u_h - sol.u_p
    rhs = energy_norm(K, d) ** 2 - 2 * d @ (K @ sol.u_s) + energy_norm(K, sol.u_s) ** 2
    assert abs(lhs - rhs) <= 1e-9 * energy_norm(K, d) ** 2


def test_dirichlet_trace(rf_problem, rf_solution):
    prob, _ = rf_problem
    *_, sol = rf_solution
    assert np.max(np.abs(sol.u_G[prob.mesh.dirichlet_nodes] - 1.0)) <= 1e-8


def test_zero_data_gives_zero():
    mesh = build_mesh(24, 24)
    prob = FineProblem.assemble(mesh, random_field(mesh, 0, patch_scale=1 / 8), zero_data())
    sol = solve_msgfem(prob, build_decomposition(mesh, 2, 2, 2), n_loc=4, s=20)
    assert np.max(np.abs(sol.u_G)) == 0.0


def test_error_nonincreasing_in_nloc(rf_problem):
    prob, u_h = rf_problem
    decomp = build_decomposition(prob.mesh, 3, 2, 2)
    errs = [relative_energy_error(prob.K, u_h, solve_msgfem(prob, decomp, n, s=40).u_G) for n in range(1, 9)]
    assert all(b <= a + 1e-10 for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 0.5 * errs[0]


def test_full_space_is_exact():
    mesh = build_mesh(16, 16)
    prob = FineProblem.assemble(mesh, random_field(mesh, 4, patch_scale=1 / 8), benchmark_problem_data("HighContrast"))
    u_h = reference_solve(prob)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LocalSpaceWarning)
        sol = solve_msgfem(prob, build_decomposition(mesh, 2, 2, 16), n_loc=500, s=500)
    assert relative_energy_error(prob.K, u_h, sol.u_G) <= 1e-8
    assert sol.meta["ell"] == 16 and sol.meta["kappa"] == 4


def test_workers_deterministic(rf_problem):
    prob, _ = rf_problem
    decomp = build_decomposition(prob.mesh, 3, 2, 2)
    a = solve_msgfem(prob, decomp, 4, s=20)
    b = solve_msgfem(prob, decomp, 4, s=20, workers=3)
    np.testing.assert_array_equal(a.u_G, b.u_G)


def test_empty_coarse_space_returns_particular(rf_problem):
    import scipy.sparse as sp

    prob, _ = rf_problem
    u_p = np.arange(prob.mesh.n_nodes, dtype=float)
    sol = coarse_solve(prob, u_p, sp.csc_matrix((prob.mesh.n_nodes, 0)))
    np.testing.assert_array_equal(sol.u_G, u_p)
    assert sol.n_basis == 0


def test_pivoted_solve_drops_redundant_directions(rng):
    V = rng.standard_normal((10, 4))
    V = np.column_stack([V, V[:, 0] + V[:, 1]])  # fifth column is dependent
    G = V.T @ V
    target = rng.standard_normal(10)
    r = V.T @ target
    c, rank = pivoted_spd_solve(G, r)
    assert rank == 4
    # same projection as the least-squares fit onto span(V)
    best = V @ np.linalg.lstsq(V, target, rcond=None)[0]
    np.testing.assert_allclose(V @ c, best, atol=1e-10)
    assert pivoted_spd_solve(np.zeros((0, 0)), np.zeros(0))[1] == 0
    with pytest.raises(ValueError):
        pivoted_spd_solve(np.zeros((2, 2)), np.ones(2))


def test_h_of_s_values_and_bounds():
    assert abs(h_of_s(0.5) - (1 - np.log(2))) <= 1e-12
    assert h_of_s(0.0) == 1.0 and h_of_s(1.0) == 0.0
    s = np.linspace(0, 1, 1000)
    h = np.array([h_of_s(v) for v in s])
    assert np.all(np.diff(h) < 0)
    assert np.all(h >= np.maximum(0.75 - s, (1 - s) / 2))
    assert np.all((h[1:-1] >= 0) & (h[1:-1] < 1))
    for bad in (-0.1, 1.1):
        with pytest.raises(ValueError):
            h_of_s(bad)


def test_theory_bounds():
    d = build_decomposition(build_mesh(400, 400), 4, 2, 12)
    tb = TheoryBounds.from_decomposition(d)
    assert tb.rho == pytest.approx(0.8125)
    assert tb.h_of_rho == pytest.approx(1 + 0.8125 * np.log(0.8125) / 0.1875)


def test_constant_coefficient_msgfem_converges():
    mesh = build_mesh(32, 32)
    prob = FineProblem.assemble(mesh, constant_field(mesh), benchmark_problem_data("RandomField"))
    u_h = reference_solve(prob)
    sol = solve_msgfem(prob, build_decomposition(mesh, 2, 2, 4), n_loc=10, s=40)
    assert relative_energy_error(prob.K, u_h, sol.u_G) < 1e-2
