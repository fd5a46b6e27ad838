
import numpy as np
import pytest
import scipy.sparse as sp

from reiterhom import nfunction as N
from reiterhom.cell import tabulate_q
from reiterhom.errors import ConvergenceError, OutOfRangeError, UsageError
from reiterhom.flux import DegenerateWeight, make_degenerate, make_linear_separable, make_phi_laplacian
from reiterhom.grid import ScalarField, cell_grid, h1_norm, l2_norm, omega_grid, transfer
from reiterhom.solver import (
    SolveOptions,
    boundary_cutoff,
    fine_energy,
    fine_grid_for,
    homog_triple,
    macro_energy,
    reconstruct,
    solve_fine,
    solve_macro,
    solve_monotone_system,
)

OPTS = SolveOptions()
SIN_Y = "2+sin(2*pi*y1)"
SIN_Z = "2+sin(2*pi*z1)"


def kappa_q(kappa, d=1):
    def q(r, xi):
        xi = np.asarray(xi, dtype=float).reshape(-1, d)
        return kappa * xi, np.zeros_like(xi), np.broadcast_to(kappa * np.eye(d), (xi.shape[0], d, d)).copy()
    return q


def plap3_oracle(x, m=400001):
    """Dense-grid solution of -(|u'| u')' = 1, u(0) = u(1) = 0, by bisection on the first integral.

    The first integral is |u'| u' = C - x; C is fixed by u(1) = 0.
    """
    s = np.linspace(0.0, 1.0, m)

    def slope(c):
        v = c - s
        return np.sign(v) * np.sqrt(np.abs(v))

    def end_value(c):
        g = slope(c)
        return float(np.sum((g[1:] + g[:-1]) / 2) / (m - 1))

    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if end_value(mid) > 0:
            hi = mid
        else:
            lo = mid
    g = slope(0.5 * (lo + hi))
    u = np.concatenate([[0.0], np.cumsum((g[1:] + g[:-1]) / 2) / (m - 1)])
    return np.interp(x, s, u)


def test_plap3_oracle_against_closed_form():
    x = np.linspace(0, 1, 11)
    closed = (2 / 3) * (0.5**1.5 - np.abs(0.5 - x) ** 1.5)
    assert np.allclose(plap3_oracle(x), closed, atol=1e-8)


def test_linear_spd_one_step():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(6, 6))
    A = m @ m.T + 6 * np.eye(6)
    b = rng.normal(size=6)
    res = solve_monotone_system(lambda x: A @ x - b, np.zeros(6), OPTS, lambda x: sp.csr_matrix(A))
    assert res.iterations == 1
    assert np.allclose(A @ res.solution, b, atol=1e-12)


def test_scalar_cubic():
    res = solve_monotone_system(lambda x: x**3 - 8.0, np.array([1.0]), OPTS)
    assert abs(res.solution[0] - 2.0) <= 1e-10
    res = solve_monotone_system(lambda x: x**3 - 8.0, np.array([1.0]), OPTS,
                                lambda x: sp.csr_matrix(np.array([[3 * x[0] ** 2]])))
    assert abs(res.solution[0] - 2.0) <= 1e-10


def test_newton_failure_is_convergence_error():
    with pytest.raises(ConvergenceError) as info:
        solve_monotone_system(lambda x: np.arctan(x) + 2.0, np.array([0.0]), SolveOptions(max_iter=5))
    assert info.value.residual > 0 and info.value.trace


def test_options_validation():
    with pytest.raises(UsageError):
        SolveOptions(tol=0.0)
    with pytest.raises(UsageError):
        SolveOptions(max_iter=0)
    assert SolveOptions.from_config({"tol": 1e-8, "unknown": 1}).tol == 1e-8


def test_plap3_fine_matches_oracle():
    a = make_phi_laplacian(N.scaled_power(3), 1.0, 1.0, 1)
    grid = omega_grid(1, 2048)
    u = solve_fine(a, 1.0, 1.0, grid, OPTS)
    x = grid.dof_coords[:, 0]
    assert np.max(np.abs(u.values - plap3_oracle(x))) <= 1e-6


def test_macro_kappa3():
    grid = omega_grid(1, 128)
    u = solve_macro(kappa_q(3.0), 1.0, grid, OPTS)
    x = grid.dof_coords[:, 0]
    assert np.max(np.abs(u.values - x * (1 - x) / 6)) <= 1e-4


def test_macro_zero_source():
    table = tabulate_q(make_phi_laplacian(N.scaled_power(3), SIN_Y, SIN_Z, 1), [-1.0, 1.0], (-1.0, 1.0), 5,
                       {"Y": 16, "Z": 16}, OPTS)
    u = solve_macro(table, 0.0, omega_grid(1, 32), OPTS)
    assert np.array_equal(u.values, np.zeros(31))


def test_macro_linearity_in_f():
    grid = omega_grid(2, 16)
    u1 = solve_macro(kappa_q(3.0, 2), "1+x1*x2", grid, OPTS)
    u2 = solve_macro(kappa_q(3.0, 2), "2+2*x1*x2", grid, OPTS)
    assert np.max(np.abs(u2.values - 2 * u1.values)) <= 1e-9


def _degenerate():
    w = DegenerateWeight.from_config({"h": "(t+2)/(2*t+3)", "h_min": 0.5})
    return make_degenerate(N.scaled_power(3), SIN_Y, SIN_Z, w, 1)


@pytest.mark.parametrize("which", ["plap3", "degenerate"])
def test_macro_two_initial_guesses_agree(which):
    a = make_phi_laplacian(N.scaled_power(3), SIN_Y, SIN_Z, 1) if which == "plap3" else _degenerate()
    table = tabulate_q(a, np.linspace(-0.5, 0.5, 5), (-2.0, 2.0), 17, {"Y": 32, "Z": 32}, OPTS)
    grid = omega_grid(1, 64)
    u_a = solve_macro(table, 1.0, grid, OPTS, init=np.zeros(grid.ndof))
    # a smooth random start keeps every gradient inside the tabulated box
    x = grid.dof_coords[:, 0]
    c = np.random.default_rng(1).uniform(-1, 1, 3)
    init = 0.03 * sum(ck * np.sin((k + 1) * np.pi * x) for k, ck in enumerate(c))
    u_b = solve_macro(table, 1.0, grid, OPTS, init=init)
    assert np.max(np.abs(u_a.values - u_b.values)) <= 1e-8
    work, load = macro_energy(table, u_a, 1.0)
    assert abs(work - load) <= 10 * OPTS.tol


def test_macro_out_of_hull():
    table = tabulate_q(make_linear_separable(SIN_Y, SIN_Z, 1), [-1.0, 1.0], (-0.1, 0.1), 3, {"Y": 8, "Z": 8}, OPTS)
    with pytest.raises(OutOfRangeError):
        solve_macro(table, 10.0, omega_grid(1, 32), OPTS)


def test_macro_rejects_periodic_grid():
    with pytest.raises(UsageError):
        solve_macro(kappa_q(1.0), 1.0, cell_grid(1, 8), OPTS)


def test_fine_identity_flux():
    a = make_linear_separable(1.0, 1.0, 1)
    for eps in (0.5, 0.25):
        grid = fine_grid_for(eps)
        u = solve_fine(a, eps, 1.0, grid, OPTS)
        x = grid.dof_coords[:, 0]
        assert np.max(np.abs(u.values - x * (1 - x) / 2)) <= 1e-12


def test_fine_grid_rule():
    assert fine_grid_for(0.25).n == 128
    assert fine_grid_for(0.125).n == 512
    assert fine_grid_for(0.5, 2).n == 32
    a = make_linear_separable(SIN_Y, SIN_Z, 1)
    with pytest.raises(UsageError):
        solve_fine(a, 0.25, 1.0, omega_grid(1, 64), OPTS)
    with pytest.raises(UsageError):
        solve_fine(a, 1.5, 1.0, omega_grid(1, 64), OPTS)


def test_fine_energy_identity_and_determinism():
    a = make_linear_separable(SIN_Y, SIN_Z, 1)
    grid = fine_grid_for(0.25)
    u, res = solve_fine(a, 0.25, 1.0, grid, OPTS, full_output=True)
    assert res.residual_norm <= OPTS.tol
    work, load = fine_energy(a, 0.25, u, 1.0)
    assert abs(work - load) <= 1e-8
    assert abs(work - load) <= 10 * OPTS.tol
    again = solve_fine(a, 0.25, 1.0, grid, OPTS)
    assert np.array_equal(u.values, again.values)


def test_fine_degenerate_energy_identity_2d():
    a = make_degenerate(N.scaled_power(3), "2+sin(2*pi*y1)*sin(2*pi*y2)", 1.0,
                        DegenerateWeight.from_config({"h": "(t+2)/(2*t+3)", "h_min": 0.5}), 2)
    grid = fine_grid_for(1.0, 2, 16)
    u = solve_fine(a, 1.0, "1+x1", grid, OPTS)
    work, load = fine_energy(a, 1.0, u, "1+x1")
    assert abs(work - load) <= 10 * OPTS.tol


def test_fine_converges_to_homogenized():
    a = make_linear_separable(SIN_Y, SIN_Z, 1)
    errs = []
    for eps in (0.25, 0.125):
        grid = fine_grid_for(eps)
        u = solve_fine(a, eps, 1.0, grid, OPTS)
        x = grid.dof_coords[:, 0]
        errs.append(l2_norm(ScalarField(grid, u.values - x * (1 - x) / 6)))
    assert errs[1] < errs[0]


def test_boundary_cutoff():
    x = np.array([[0.0], [0.05], [0.5], [0.99], [1.0]])
    assert np.allclose(boundary_cutoff(x, 0.1), [0.0, 0.5, 1.0, 0.1, 0.0])


def test_reconstruct_constant_flux_is_u0():
    a = make_phi_laplacian(N.scaled_power(3), 1.0, 1.0, 1)
    u0 = solve_macro(tabulate_q(a, [-1.0, 1.0], (-1.0, 1.0), 5, {"Y": 8, "Z": 8}), 1.0, omega_grid(1, 32), OPTS)
    rec = reconstruct(u0, a, 0.5, {"Y": 8, "Z": 8}, OPTS)
    assert np.allclose(rec.values, u0(rec.grid.dof_coords), atol=1e-14)


_LINEAR = {}


def _linear_setup():
    if not _LINEAR:
        a = make_linear_separable(SIN_Y, SIN_Z, 1)
        eps = 0.125
        grid = fine_grid_for(eps)
        u_eps = solve_fine(a, eps, 1.0, grid, OPTS)
        u0 = solve_macro(kappa_q(3.0), 1.0, omega_grid(1, 128), OPTS)
        triple = homog_triple(u0, a, {"Y": 64, "Z": 64}, OPTS)
        _LINEAR.update(a=a, eps=eps, grid=grid, u_eps=u_eps, u0=u0, triple=triple)
    return _LINEAR


def test_reconstruct_improves_gradient():
    s = _linear_setup()
    rec = reconstruct(s["u0"], s["a"], s["eps"], None, OPTS, triple=s["triple"], grid=s["grid"])
    plain = transfer(s["u0"], s["grid"])
    err_rec = h1_norm(s["u_eps"] - rec)
    err_u0 = h1_norm(s["u_eps"] - plain)
    assert err_rec < err_u0


def test_triple_correctors_have_zero_mean():
    t = _linear_setup()["triple"]
    wy = t.grid_Y.node_mass
    wz = t.grid_Z.node_mass
    assert np.max(np.abs(t.outer @ wy)) <= 1e-12
    assert np.max(np.abs(t.inner @ wz)) <= 1e-12
    assert np.max(t.residuals) <= OPTS.tol


def test_reconstruction_gradient_clusters_at_limit():
    # at a fixed number of fine cells per eps^2 period, the reconstructed gradient
    # approaches Du0 + D_y u1 + D_z u2 as eps shrinks
    s = _linear_setup()
    ratios = []
    for eps in (0.25, 0.125):
        grid = fine_grid_for(eps, 1, int(32 / eps**2))
        rec = reconstruct(s["u0"], s["a"], eps, None, OPTS, triple=s["triple"], grid=grid)
        x = grid.quad_points.reshape(-1, 1)
        g_rec = grid.grad_at_quad(rec.values).reshape(-1)
        g_lim = s["triple"].grad_limit(x, x / eps, x / eps**2).reshape(-1)
        g0 = s["u0"].grid.interpolate_grad(s["u0"].values, x).reshape(-1)
        mid = (x[:, 0] > 0.25) & (x[:, 0] < 0.75)
        gap = np.sqrt(np.mean((g_rec - g_lim)[mid] ** 2))
        spread = np.sqrt(np.mean((g_lim - g0)[mid] ** 2))
        ratios.append(gap / spread)
    assert ratios[1] < ratios[0]
    assert ratios[1] < 0.2


def test_triple_interpolates_between_cells():
    t = _linear_setup()["triple"]
    g = t.u0.grid
    y = np.array([[0.1]])
    # at a cell centre the interpolant is that cell's corrector
    c = 40
    xc = g.cell_centers[c : c + 1]
    assert np.allclose(t.u1(xc, y), t.grid_Y.interpolate(t.outer[c], y), atol=1e-15)
    # halfway between two centres it is the average
    xm = xc + g.h / 2
    both = 0.5 * (t.grid_Y.interpolate(t.outer[c], y) + t.grid_Y.interpolate(t.outer[c + 1], y))
    assert np.allclose(t.u1(xm, y), both, atol=1e-15)
