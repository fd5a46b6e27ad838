import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reiterhom import nfunction as N
from reiterhom.cell import (
    EffectiveFluxTable,
    eval_h,
    eval_q,
    interp_q,
    solve_inner_cell,
    solve_outer_cell,
    tabulate_q,
)
from reiterhom.errors import ConvergenceError, OutOfRangeError, UsageError
from reiterhom.flux import DegenerateWeight, make_degenerate, make_linear_separable, make_phi_laplacian
from reiterhom.grid import cell_grid, gradient, integrate, omega_grid
from reiterhom.newton import SolveOptions

SIN_Y = "2+sin(2*pi*y1)"
SIN_Z = "2+sin(2*pi*z1)"
OPTS = SolveOptions()


def harmonic_mean(c, m=200000):
    # midpoint oracle of (int_0^1 dz / c(z))^{-1}
    s = (np.arange(m) + 0.5) / m - 0.5
    return 1.0 / np.mean(1.0 / c(s))


def test_harmonic_oracle():
    assert harmonic_mean(lambda s: 2 + np.sin(2 * np.pi * s)) == pytest.approx(math.sqrt(3), abs=1e-12)


def test_inner_sqrt3():
    a = make_linear_separable(1.0, SIN_Z, 1)
    sol = solve_inner_cell(a, [0.0], 0.0, [1.0], cell_grid(1, 256), OPTS)
    assert abs(sol.averaged_flux[0] - math.sqrt(3)) <= 1e-3
    assert abs(integrate(sol.corrector)) <= 1e-12
    assert sol.residual_norm <= OPTS.tol


def test_inner_plaplacian_16_9():
    a = make_phi_laplacian(N.scaled_power(3), 1.0, "piecewise:[1,4]", 1)
    sol = solve_inner_cell(a, [0.0], 0.0, [1.0], cell_grid(1, 256), OPTS)
    # (mean c^{-1/2})^{-2} = (0.75)^{-2}
    assert abs(sol.averaged_flux[0] - 16 / 9) <= 1e-3
    assert abs(integrate(sol.corrector)) <= 1e-12


def test_inner_z_independent_has_zero_corrector():
    a = make_phi_laplacian(N.scaled_power(3), SIN_Y, 1.0, 2)
    y, xi = np.array([0.1, -0.3]), np.array([0.7, -1.1])
    sol = solve_inner_cell(a, y, 0.5, xi, cell_grid(2, 16), OPTS)
    assert np.max(np.abs(sol.corrector.values)) <= 1e-10
    assert np.allclose(sol.averaged_flux, a(y, np.zeros(2), 0.5, xi), atol=1e-10)
    assert np.allclose(eval_h(a, y, 0.5, xi, cell_grid(2, 16)), a(y, np.zeros(2), 0.5, xi), atol=1e-10)


def test_eval_h_linearity_and_zero():
    a = make_linear_separable(SIN_Y, "2+sin(2*pi*z1)*cos(2*pi*z2)", 2)
    g = cell_grid(2, 16)
    y = np.array([0.2, 0.1])
    h1 = eval_h(a, y, 0.0, [0.4, -0.3], g, OPTS)
    h2 = eval_h(a, y, 0.0, [0.8, -0.6], g, OPTS)
    assert np.allclose(h2, 2 * h1, atol=1e-9)
    assert np.array_equal(eval_h(a, y, 1.0, [0.0, 0.0], g, OPTS), np.zeros(2))


def test_inner_mesh_convergence():
    a = make_linear_separable(1.0, SIN_Z, 1)
    ns = [32, 64, 128, 256]
    errs = [abs(eval_h(a, [0.0], 0.0, [1.0], cell_grid(1, n), OPTS)[0] - math.sqrt(3)) for n in ns]
    assert all(e1 > e2 for e1, e2 in zip(errs, errs[1:]))
    orders = [math.log2(e1 / e2) for e1, e2 in zip(errs, errs[1:])]
    assert min(orders) >= 1.5


def test_outer_reiterated_harmonic_mean():
    a = make_linear_separable(SIN_Y, SIN_Z, 1)
    t0 = time.perf_counter()
    sol = solve_outer_cell(a, 0.0, [1.0], (cell_grid(1, 256), cell_grid(1, 256)), OPTS)
    assert time.perf_counter() - t0 < 5.0
    assert abs(sol.averaged_flux[0] - 3.0) <= 2e-3
    assert abs(integrate(sol.corrector)) <= 1e-12


def test_outer_single_scale():
    a = make_linear_separable(SIN_Y, 1.0, 1)
    sol = solve_outer_cell(a, 0.0, [1.0], (cell_grid(1, 128), cell_grid(1, 32)), OPTS)
    assert abs(sol.averaged_flux[0] - math.sqrt(3)) <= 1e-3
    assert np.max(np.abs(sol.inner)) <= 1e-10


def test_outer_constant_flux():
    a = make_phi_laplacian(N.power_log(2), 1.0, 1.0, 2)
    xi = np.array([0.3, -0.9])
    sol = solve_outer_cell(a, 0.2, xi, (cell_grid(2, 8), cell_grid(2, 8)), OPTS)
    assert np.max(np.abs(sol.corrector.values)) <= 1e-10
    assert np.allclose(sol.averaged_flux, a(np.zeros(2), np.zeros(2), 0.2, xi), atol=1e-10)
    assert np.allclose(eval_q(a, 0.2, xi, {"Y": 8, "Z": 8}), sol.averaged_flux, atol=1e-12)


def test_outer_2d_laminate_means():
    # c depends on y1 and z2 only: q = (harmonic in y1 of arithmetic in z2, arithmetic in y1 of harmonic in z2)
    a = make_linear_separable(SIN_Y, "2+sin(2*pi*z2)", 2)
    grids = (cell_grid(2, 16), cell_grid(2, 16))
    q1 = solve_outer_cell(a, 0.0, [1.0, 0.0], grids, OPTS).averaged_flux
    q2 = solve_outer_cell(a, 0.0, [0.0, 1.0], grids, OPTS).averaged_flux
    assert q1[0] == pytest.approx(math.sqrt(3) * 2, rel=5e-3)
    assert q2[1] == pytest.approx(2 * math.sqrt(3), rel=5e-3)
    assert abs(q1[1]) <= 1e-9 and abs(q2[0]) <= 1e-9


def test_cell_energy_identity_degenerate():
    w = DegenerateWeight.from_config({"h": "(t+2)/(2*t+3)", "h_min": 0.5})
    a = make_degenerate(N.scaled_power(3), 1.0, "2+sin(2*pi*z1)*cos(2*pi*z2)", w, 2)
    g = cell_grid(2, 16)
    theta = float(N.conjugate_inverse_of(N.scaled_power(3))(0.5))
    y = np.array([0.1, 0.2])
    for r, xi in [(0.0, [1.0, 0.5]), (1.5, [-0.7, 0.2])]:
        sol = solve_inner_cell(a, y, r, xi, g, OPTS)
        lam = gradient(sol.corrector).values + np.asarray(xi)
        zq = g.quad_points
        flux = a(np.broadcast_to(y, zq.shape), zq, np.full(zq.shape[:-1], r), lam)
        work = integrate(np.sum(flux * lam, axis=-1), g)
        bound = theta * integrate(N.scaled_power(3).value(np.linalg.norm(lam, axis=-1)), g)
        assert work >= bound - OPTS.tol
        # the averaged flux is the mean of a at the corrected gradient
        assert np.allclose(integrate(flux, g), sol.averaged_flux, atol=1e-12)


def test_nonperiodic_grid_is_usage_error():
    a = make_linear_separable(1.0, SIN_Z, 1)
    with pytest.raises(UsageError):
        solve_inner_cell(a, [0.0], 0.0, [1.0], omega_grid(1, 16), OPTS)
    with pytest.raises(UsageError):
        solve_outer_cell(a, 0.0, [1.0], (omega_grid(1, 16), cell_grid(1, 16)), OPTS)


def test_convergence_error_carries_residual():
    a = make_phi_laplacian(N.scaled_power(4), 1.0, "piecewise:[1,40]", 1)
    with pytest.raises(ConvergenceError) as info:
        solve_inner_cell(a, [0.0], 0.0, [1.0], cell_grid(1, 64), SolveOptions(max_iter=1, max_halvings=1))
    assert info.value.residual > 0


def test_table_linear_is_exact_between_nodes():
    a = make_linear_separable(SIN_Y, SIN_Z, 1)
    grids = {"Y": 32, "Z": 32}
    table = tabulate_q(a, [-1.0, 1.0], (-2.0, 2.0), 5, grids, OPTS)
    for xi in (-1.5, -0.5, 0.5, 1.7):
        direct = eval_q(a, 0.0, [xi], grids, OPTS)
        assert abs(interp_q(table, 0.0, [xi])[0] - direct[0]) <= 1e-6
    assert np.array_equal(table.values[0], table.values[1])
    assert np.array_equal(table.values[:, 2], np.zeros((2, 1)))


def test_table_nonlinear_spot_checks_converge():
    # off-node interpolation error of a p = 3 table drops like the squared node spacing
    a = make_phi_laplacian(N.scaled_power(3), SIN_Y, SIN_Z, 1)
    grids = {"Y": 16, "Z": 16}
    xs = (-0.77, -0.31, 0.13, 0.58, 0.91)
    direct = [eval_q(a, 0.0, [x], grids, OPTS)[0] for x in xs]
    errs = []
    for n in (9, 17, 33):
        table = tabulate_q(a, [-1.0, 1.0], (-1.0, 1.0), n, grids, OPTS)
        errs.append(max(abs(interp_q(table, 0.0, [x])[0] - d) for x, d in zip(xs, direct)))
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_table_node_and_hull():
    a = make_phi_laplacian(N.scaled_power(3), SIN_Y, SIN_Z, 1)
    table = tabulate_q(a, [-1.0, 0.0, 1.0], (-1.0, 1.0), 5, {"Y": 16, "Z": 16}, OPTS)
    assert np.array_equal(interp_q(table, 0.0, [0.5]), table.values[1, 3])
    with pytest.raises(OutOfRangeError):
        interp_q(table, 0.0, [1.5])
    with pytest.raises(OutOfRangeError):
        interp_q(table, 2.0, [0.0])


def test_table_2d_linear_interpolation_exact():
    a = make_linear_separable("2+sin(2*pi*y1)", "2+cos(2*pi*z2)", 2)
    table = tabulate_q(a, [0.0, 1.0], (-1.0, 1.0), 3, {"Y": 8, "Z": 8}, OPTS)
    rng = np.random.default_rng(0)
    q = table.values[0, 2, 1]
    q_e2 = table.values[0, 1, 2]
    for xi in rng.uniform(-1, 1, (10, 2)):
        expect = xi[0] * q + xi[1] * q_e2
        assert np.allclose(interp_q(table, 0.3, xi), expect, atol=1e-12)


def test_table_roundtrip(tmp_path):
    a = make_linear_separable(SIN_Y, SIN_Z, 1)
    table = tabulate_q(a, [-1.0, 1.0], (-1.0, 1.0), 3, {"Y": 8, "Z": 8}, OPTS)
    path = str(tmp_path / "q.csv")
    table.write(path)
    back = EffectiveFluxTable.read(path)
    assert np.array_equal(back.values, table.values)
    assert np.array_equal(back.r_grid, table.r_grid)
    assert back.provenance["grids"] == {"Y": 8, "Z": 8}


def test_table_rejects_bad_box():
    a = make_linear_separable(1.0, 1.0, 1)
    with pytest.raises(UsageError):
        tabulate_q(a, [0.0, 1.0], (0.0, 1.0), 3, {"Y": 4, "Z": 4})


def test_table_is_schedule_independent():
    w = DegenerateWeight.from_config({"h": "(t+2)/(2*t+3)", "h_min": 0.5})
    a = make_degenerate(N.scaled_power(3), SIN_Y, SIN_Z, w, 1)
    kw = dict(r_grid=[-1.0, 0.0, 1.0], xi_box=(-1.0, 1.0), xi_n=5, grids={"Y": 16, "Z": 16}, opts=OPTS)
    serial = tabulate_q(a, workers=1, **kw)
    threaded = tabulate_q(a, workers=4, **kw)
    assert np.array_equal(serial.values, threaded.values)
    # the weight makes q depend on r
    assert not np.array_equal(serial.values[0], serial.values[1])


_PLAP_TABLE = {}


def _plap_table():
    if not _PLAP_TABLE:
        a = make_phi_laplacian(N.scaled_power(3), SIN_Y, "piecewise:[1,4]", 1)
        _PLAP_TABLE["t"] = tabulate_q(a, [-1.0, 1.0], (-2.0, 2.0), 9, {"Y": 32, "Z": 32}, OPTS)
    return _PLAP_TABLE["t"]


@settings(max_examples=60, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-1, 1))
def test_q_monotone(x1, x2, r):
    table = _plap_table()
    q1, q2 = interp_q(table, r, [x1]), interp_q(table, r, [x2])
    assert (q1[0] - q2[0]) * (x1 - x2) >= 0.0
