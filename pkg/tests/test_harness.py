import json
import math

import numpy as np
import pytest

from reiterhom.errors import ConvergenceError, OutOfRangeError, UsageError
from reiterhom.grid import ScalarField, integrate, omega_grid
from reiterhom.harness import (
    DEFAULT_PAIRING,
    SeparableTest,
    StudyConfig,
    StudyRow,
    convergence_study,
    empirical_rates,
    export,
    export_plot_data,
    load_rows,
    three_system_residuals,
    triple_integral,
    twoscale_pairing,
    write_outputs,
)
from reiterhom.newton import SolveOptions

LINEAR = {"family": "linear_separable", "c_y": "2+sin(2*pi*y1)", "c_z": "2+sin(2*pi*z1)"}


def smooth_g(x, y, z):
    return (1 + x[:, 0]) * (1 + 0.5 * np.cos(2 * np.pi * y[:, 0])) * (1 + 0.5 * np.sin(2 * np.pi * z[:, 0]))


def test_pairing_examples():
    one = lambda x: np.ones(len(x))
    assert twoscale_pairing(one, "1", 0.5) == pytest.approx(1.0, abs=1e-13)
    assert abs(twoscale_pairing(one, "sin(2*pi*z1)", 0.25)) <= 2e-3
    with pytest.raises(UsageError):
        twoscale_pairing(one, "1", 0.25, n=64)


def test_triple_integral_examples():
    assert triple_integral(lambda x, y, z: np.ones(len(x))) == pytest.approx(1.0, abs=1e-13)
    assert abs(triple_integral(lambda x, y, z: np.sin(2 * np.pi * y[:, 0]))) <= 1e-12
    val = triple_integral(lambda x, y, z: x[:, 0] * (2 + np.sin(2 * np.pi * z[:, 0])))
    assert val == pytest.approx(1.0, abs=1e-6)
    assert triple_integral(lambda x, y, z: x[:, 0] * x[:, 1] + 0 * y[:, 0], dim=2) == pytest.approx(0.25, abs=1e-12)


def test_triple_integral_matches_product_of_means():
    # separable integrand: the triple integral is the product of three 1D integrals
    fx = lambda s: np.exp(s)
    gy = lambda s: 2 + np.cos(2 * np.pi * s)
    wz = lambda s: 3 + np.sin(2 * np.pi * s) ** 2
    expected = (math.e - 1) * 2.0 * 3.5
    got = triple_integral(lambda x, y, z: fx(x[:, 0]) * gy(y[:, 0]) * wz(z[:, 0]))
    assert got == pytest.approx(expected, rel=1e-7)


@pytest.mark.parametrize("k", range(3))
def test_pairing_of_oscillating_trace_converges(k):
    test = SeparableTest.from_config({**DEFAULT_PAIRING[k], "target": "u"})
    limit = triple_integral(lambda x, y, z: smooth_g(x, y, z) * test(x, y, z), n=(256, 64, 64))
    gaps = []
    for eps in (0.5, 0.25, 0.125):
        trace = lambda x, eps=eps: smooth_g(x, x / eps, x / eps**2)
        gaps.append(abs(twoscale_pairing(trace, test, eps) - limit))
    assert gaps[0] > gaps[1] > gaps[2]


def test_pairing_consistency_for_x_only_tests():
    grid = omega_grid(1, 64)
    u = ScalarField.from_function(grid, lambda p: np.sin(3 * p[..., 0]) * p[..., 0] * (1 - p[..., 0]))
    direct = integrate(lambda p: u(p.reshape(-1, 1)).reshape(p.shape[:-1]) * (1 + p[..., 0]), grid)
    for eps in (0.5, 0.25, 0.125):
        assert twoscale_pairing(u, "1+x1", eps) == pytest.approx(direct, abs=1e-9)


def test_separable_test_validation():
    with pytest.raises(UsageError):
        SeparableTest(target="v")
    with pytest.raises(UsageError):
        SeparableTest(component=2, dim=1)
    t = SeparableTest.from_config({"x": "x1", "y": "cos(2*pi*y1)", "target": "grad"})
    assert t.derivative == 0


def test_study_config_validation(tmp_path):
    with pytest.raises(UsageError):
        StudyConfig(flux=LINEAR, eps_list=(0.25, 0.5))
    with pytest.raises(UsageError):
        StudyConfig(flux=LINEAR, norms=("h2",))
    with pytest.raises(UsageError):
        StudyConfig(flux=LINEAR, eps_list=(0.25,), grids={"fine": 64})
    with pytest.raises(UsageError):
        StudyConfig.from_dict({"flux": LINEAR, "bogus": 1})
    with pytest.raises(UsageError):
        StudyConfig.load(tmp_path / "missing.json")
    cfg = StudyConfig(flux=LINEAR)
    assert StudyConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))).to_dict() == cfg.to_dict()


_STUDY = {}


def _linear_study():
    if not _STUDY:
        cfg = StudyConfig(flux=LINEAR, eps_list=(0.25, 0.125, 0.0625), timing=False,
                          table={"r": [-1, 1, 2], "xi_box": [-1, 1], "xi_n": 9})
        _STUDY["cfg"], _STUDY["res"] = cfg, convergence_study(cfg)
    return _STUDY["cfg"], _STUDY["res"]


def test_linear_study_rows():
    cfg, res = _linear_study()
    rows = res.rows
    assert [r.eps for r in rows] == [0.25, 0.125, 0.0625]
    assert not res.failed
    errs = [r.err_l2 for r in rows]
    assert errs[0] > errs[1] > errs[2]
    for r in rows:
        assert min(r.err_lux, r.err_l2, r.err_corrector) >= 0
        assert abs(r.energy_gap) <= 10 * cfg.options().tol
    # the gradient pairing against sin(2 pi y) sin(2 pi z) probes the inner corrector
    gaps = [r.pairing_gaps[2] for r in rows]
    assert gaps[0] > gaps[1] > gaps[2]
    assert len(res.rates["err_l2"]) == 2


def test_three_system_residuals():
    cfg, res = _linear_study()
    from reiterhom.cell import tabulate_q
    from reiterhom.flux import flux_from_config

    a = flux_from_config(LINEAR)
    table = tabulate_q(a, [-1, 1], (-1, 1), 9, {"Y": 64, "Z": 64}, SolveOptions())
    out = three_system_residuals(res.u0, table, res.triple, a, 1.0, SolveOptions())
    assert max(out.values()) <= 10 * SolveOptions().tol


def test_constant_flux_study_is_exact():
    cfg = StudyConfig(flux={"family": "identity"}, eps_list=(0.5, 0.25, 0.125),
                      grids={"omega": 512, "fine": 512, "Y": 8, "Z": 8},
                      table={"r": [-1, 1, 2], "xi_box": [-1, 1], "xi_n": 5}, timing=False)
    for r in convergence_study(cfg).rows:
        assert max(r.err_lux, r.err_l2, r.err_corrector) <= 1e-8


def test_macro_outside_table_aborts_study():
    cfg = StudyConfig(flux=LINEAR, eps_list=(0.5, 0.25), grids={"omega": 32, "Y": 8, "Z": 8},
                      table={"r": [-1, 1, 2], "xi_box": [-0.01, 0.01], "xi_n": 3}, norms=("l2",),
                      pairing=({"x": "sin(pi*x1)"},), timing=False)
    with pytest.raises(OutOfRangeError):
        convergence_study(cfg)


def test_failed_rows_do_not_abort(monkeypatch):
    from reiterhom import harness

    real = harness.solve_fine

    def flaky(a, eps, *args, **kw):
        if eps == 0.25:
            raise ConvergenceError("forced failure", 1.0, [1.0])
        return real(a, eps, *args, **kw)

    monkeypatch.setattr(harness, "solve_fine", flaky)
    cfg = StudyConfig(flux=LINEAR, eps_list=(0.5, 0.25, 0.125), grids={"omega": 32, "Y": 8, "Z": 8},
                      table={"r": [-1, 1, 2], "xi_box": [-1, 1], "xi_n": 5}, norms=("l2",),
                      pairing=({"x": "sin(pi*x1)"},), timing=False)
    res = convergence_study(cfg)
    assert [r.failed for r in res.rows] == [False, True, False]
    assert "forced failure" in res.rows[1].message
    assert math.isnan(res.rows[1].err_l2) and not math.isnan(res.rows[2].err_l2)
    assert all(math.isnan(v) for v in res.rates["err_l2"])


def test_empirical_rates():
    rows = [StudyRow(0.5, err_l2=0.4), StudyRow(0.25, err_l2=0.1), StudyRow(0.125, err_l2=0.0)]
    rates = empirical_rates(rows, "err_l2")
    assert rates[0] == pytest.approx(2.0) and math.isnan(rates[1])


def test_export_csv_formats(tmp_path):
    p = tmp_path / "empty.csv"
    export([], "csv", p, n_pairing=2)
    assert p.read_text() == "eps,err_lux,err_l2,err_corrector,pairing_gap_1,pairing_gap_2,energy,iterations,wall_ms\n"
    row = StudyRow(0.25, 0.1, 1 / 3, 2.0, [1e-3], 0.5, 4, 0.0)
    export([row], "csv", tmp_path / "one.csv")
    lines = (tmp_path / "one.csv").read_text().splitlines()
    assert len(lines) == 2
    assert lines[1] == "0.25,0.10000000000000001,0.33333333333333331,2,0.001,0.5,4,0"
    with pytest.raises(UsageError):
        export([row], "xml", tmp_path / "x")
    with pytest.raises(UsageError):
        export([row], "csv", tmp_path / "no" / "such" / "dir.csv")


def test_export_json_roundtrip(tmp_path):
    rows = [StudyRow(0.25, 0.1, 1 / 3, 2.0, [1e-3, 7.0], 0.5, 4, 12.5, 1e-17, 0.3),
            StudyRow(0.125, failed=True, message="ConvergenceError: x", pairing_gaps=[math.nan, math.nan])]
    path = tmp_path / "rows.json"
    export(rows, "json", path, {"k": 1})
    back, manifest = load_rows(path)
    assert manifest == {"k": 1}
    assert back[0] == rows[0]
    assert back[1].failed and math.isnan(back[1].err_l2) and back[1].message == rows[1].message


def test_plot_data(tmp_path):
    rows = [StudyRow(0.25, 0.1, 0.2, 0.3, [0.4]), StudyRow(0.125, 0.05, 0.1, 0.15, [0.2])]
    paths = export_plot_data(rows, tmp_path / "plots")
    assert len(paths) == 4
    assert (tmp_path / "plots" / "err_l2.dat").read_text().splitlines()[1:] == ["0.25 0.20000000000000001", "0.125 0.10000000000000001"]


def test_export_is_byte_deterministic(tmp_path):
    raw = {"flux": LINEAR, "eps_list": [0.5, 0.25], "grids": {"omega": 32, "Y": 16, "Z": 16},
           "table": {"r": [-1, 1, 2], "xi_box": [-1, 1], "xi_n": 5}, "timing": False}
    texts = []
    for k in range(2):
        out = {"csv": str(tmp_path / f"s{k}.csv"), "json": str(tmp_path / f"s{k}.json")}
        res = convergence_study(StudyConfig.from_dict(raw))
        write_outputs(res, out)
        texts.append(((tmp_path / f"s{k}.csv").read_bytes(), (tmp_path / f"s{k}.json").read_bytes()))
    assert texts[0] == texts[1]
