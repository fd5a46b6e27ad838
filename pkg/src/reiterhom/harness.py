"""Convergence studies, reiterated two-scale pairings and result export.

A study solves the homogenized problem once, then for every ``eps`` solves
the fine problem on a grid with at least 8 cells per ``eps^2`` period and
compares. Weak convergence is probed with a fixed dictionary of separable
test functions ``f(x) g(y) w(z)``: the pairing of ``u_eps`` (or one of its
partial derivatives) at ``(x, x/eps, x/eps^2)`` against the triple integral
of the limit.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nfunction as nfm
from .cell import _threads, tabulate_q
from .errors import HomogError, UsageError
from .expr import PointMap, xyz_function
from .flux import flux_from_config
from .grid import (
    ScalarField,
    cell_grid,
    l2_norm,
    luxemburg_norm,
    make_grid,
    omega_grid,
    orlicz_sobolev_norm,
    transfer,
)
from .newton import SolveOptions
from .solver import (
    CELLS_PER_PERIOD,
    fine_energy,
    fine_grid_for,
    homog_triple,
    reconstruct,
    solve_fine,
    solve_macro,
    source_at_quad,
)

NORMS = ("lux", "l2", "w1lphi")
FIXED_COLUMNS = ("eps", "err_lux", "err_l2", "err_corrector")
TAIL_COLUMNS = ("energy", "iterations", "wall_ms")

# the documented default dictionary of test functions
DEFAULT_PAIRING = (
    {"x": "sin(pi*x1)", "y": "1", "z": "1", "target": "u"},
    {"x": "sin(pi*x1)", "y": "cos(2*pi*y1)", "z": "1", "target": "grad"},
    {"x": "sin(pi*x1)", "y": "sin(2*pi*y1)", "z": "sin(2*pi*z1)", "target": "grad"},
)


@dataclass(frozen=True)
class SeparableTest:
    """``f(x) g(y) w(z)``; ``target`` pairs it with ``u`` or with ``d u / d x_k``."""

    x: str = "1"
    y: str = "1"
    z: str = "1"
    target: str = "u"
    component: int = 1
    dim: int = 1

    def __post_init__(self):
        if self.target not in ("u", "grad"):
            raise UsageError(f"pairing target must be 'u' or 'grad', got {self.target!r}")
        if not 1 <= self.component <= self.dim:
            raise UsageError("pairing component out of range")
        maps = (PointMap(self.x, "x", self.dim), PointMap(self.y, "y", self.dim), PointMap(self.z, "z", self.dim))
        object.__setattr__(self, "_maps", maps)

    def __call__(self, x, y, z):
        fx, gy, wz = self._maps
        return fx(x) * gy(y) * wz(z)

    @property
    def derivative(self):
        return None if self.target == "u" else self.component - 1

    @classmethod
    def from_config(cls, cfg, dim=1):
        if isinstance(cfg, cls):
            return cfg
        return cls(str(cfg.get("x", "1")), str(cfg.get("y", "1")), str(cfg.get("z", "1")),
                   cfg.get("target", "u"), int(cfg.get("component", 1)), dim)


def _test_function(fxyz, dim):
    if isinstance(fxyz, str):
        return xyz_function(fxyz, dim)
    if isinstance(fxyz, dict):
        return SeparableTest.from_config(fxyz, dim)
    if callable(fxyz):
        return fxyz
    raise UsageError(f"cannot interpret test function {fxyz!r}")


def pairing_grid(eps, dim=1, n=None, at_least=0):
    """Omega grid for oscillatory quadrature, resolving ``eps^2`` by 8 cells."""
    if not eps > 0:
        raise UsageError("eps must be positive")
    if n is not None:
        if n * eps**2 < CELLS_PER_PERIOD * (1 - 1e-12):
            raise UsageError(f"n = {n} does not resolve eps^2 = {eps**2:g} with {CELLS_PER_PERIOD} cells")
        return omega_grid(dim, int(n))
    need = max(CELLS_PER_PERIOD / eps**2, at_least, 2)
    return omega_grid(dim, 2 ** math.ceil(math.log2(need - 1e-9)))


def twoscale_pairing(u, fxyz, eps, n=None, derivative=None):
    """``int_Omega u(x) f(x, x/eps, x/eps^2) dx`` by quadrature on a resolving grid.

    Args:
        u: :class:`ScalarField` on Omega or a callable on point arrays (P, d).
        fxyz: callable ``f(x, y, z)`` on point arrays, an expression in
            ``x1, y1, z1, ...``, or a separable test description.
        n: quadrature cells per axis; default the smallest power of two with
            8 cells per ``eps^2`` period (and at least the grid of ``u``).
        derivative: pair ``d u / d x_k`` instead of ``u`` (0-based ``k``).

    Raises:
        UsageError: ``n`` given and too coarse for ``eps``.
    """
    dim = u.grid.dim if isinstance(u, ScalarField) else getattr(fxyz, "dim", 1)
    if derivative is None and isinstance(fxyz, SeparableTest):
        derivative = fxyz.derivative
    f = _test_function(fxyz, dim)
    grid = pairing_grid(eps, dim, n, u.grid.n if isinstance(u, ScalarField) else 0)
    x = grid.quad_points.reshape(-1, dim)
    if isinstance(u, ScalarField):
        if derivative is None:
            uv = u.grid.interpolate(u.values, x)
        else:
            uv = u.grid.interpolate_grad(u.values, x)[:, derivative]
    else:
        if derivative is not None:
            raise UsageError("derivative pairings need a ScalarField")
        uv = np.asarray(u(x), dtype=float)
    fv = np.asarray(f(x, x / eps, x / eps**2), dtype=float)
    w = np.tile(grid.quad_weights, grid.ncell)
    return float(np.sum(w * uv * fv))


def _quad(n, dim, box):
    g = make_grid(dim, n, box)
    return g.quad_points.reshape(-1, dim), np.tile(g.quad_weights, g.ncell)


def triple_integral(g, n=None, dim=1, chunk=1 << 21):
    """Tensor Gauss quadrature of ``g(x, y, z)`` over Omega x Y x Z.

    Args:
        g: callable on point arrays ``(P, d)`` returning ``(P,)`` or ``(P, k)``.
        n: cells per axis on (Omega, Y, Z); default (64, 64, 64) in 1D and
            (16, 8, 8) in 2D.
    """
    n = n or ((64, 64, 64) if dim == 1 else (16, 8, 8))
    (xs, wx), (ys, wy), (zs, wz) = (_quad(n[0], dim, "omega"), _quad(n[1], dim, "cell"), _quad(n[2], dim, "cell"))
    py, pz = len(ys), len(zs)
    yz_y = np.repeat(ys, pz, axis=0)
    yz_z = np.tile(zs, (py, 1))
    wyz = np.outer(wy, wz).ravel()
    step = max(1, chunk // (py * pz))
    total = 0.0
    for s in range(0, len(xs), step):
        xc = xs[s : s + step]
        m = len(xc)
        vals = np.asarray(
            g(np.repeat(xc, py * pz, axis=0), np.tile(yz_y, (m, 1)), np.tile(yz_z, (m, 1))), dtype=float
        )
        w = (wx[s : s + step, None] * wyz[None, :]).ravel()
        total = total + np.tensordot(w, vals, axes=(0, 0))
    return total if np.ndim(total) else float(total)


def limit_pairing(test: SeparableTest, u0: ScalarField, triple=None):
    """Limit side of a pairing: ``u0`` against ``f``, or the full gradient
    ``Du0 + D_y u1 + D_z u2`` against ``f`` for gradient targets."""
    dim = u0.grid.dim
    if test.target == "u":
        return triple_integral(lambda x, y, z: u0(x) * test(x, y, z), dim=dim)
    if triple is None:
        raise UsageError("gradient pairings need the corrector triple")
    k = test.component - 1
    n = (u0.grid.n, triple.grid_Y.n, triple.grid_Z.n)
    return triple_integral(lambda x, y, z: triple.grad_limit(x, y, z)[:, k] * test(x, y, z), n=n, dim=dim)


# -- studies -----------------------------------------------------------------------


@dataclass
class StudyConfig:
    """A convergence study. Every field has a default except ``flux``.

    Attributes:
        flux: flux description, see :func:`flux_from_config`.
        nf: N-function for Orlicz norms; default the flux's own Phi.
        f: right-hand side (number or expression in x1, x2).
        dim: 1 or 2.
        eps_list: strictly decreasing values in (0, 1].
        grids: cells per axis, ``{"omega": 128, "Y": 64, "Z": 64}``; optional
            ``"fine"`` fixes the fine grid (it must resolve every eps).
        table: ``{"r": [lo, hi, n], "xi_box": [lo, hi], "xi_n": n}``.
        norms: subset of ``("lux", "l2", "w1lphi")``; unlisted columns are NaN.
        pairing: list of separable test functions.
        solver: :class:`SolveOptions` fields.
        output: ``{"csv": path, "json": path, "plot_dir": path}``, all optional.
        timing: record wall times; ``False`` writes 0 for byte-stable output.
    """

    flux: dict
    nf: dict = None
    f: object = 1.0
    dim: int = 1
    eps_list: tuple = (0.25, 0.125, 0.0625)
    grids: dict = field(default_factory=lambda: {"omega": 128, "Y": 64, "Z": 64})
    table: dict = field(default_factory=dict)
    norms: tuple = NORMS
    pairing: tuple = DEFAULT_PAIRING
    solver: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    timing: bool = True

    def __post_init__(self):
        eps = [float(e) for e in self.eps_list]
        if not eps:
            raise UsageError("eps_list is empty")
        if any(not 0 < e <= 1 for e in eps):
            raise UsageError("every eps must lie in (0, 1]")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise UsageError("eps_list must be strictly decreasing")
        self.eps_list = tuple(eps)
        bad = set(self.norms) - set(NORMS)
        if bad:
            raise UsageError(f"unknown norms {sorted(bad)}; choose from {NORMS}")
        self.grids = {"omega": 128, "Y": 64, "Z": 64, **(self.grids or {})}
        fine = self.grids.get("fine")
        if fine is not None:
            for e in eps:
                if int(fine) * e**2 < CELLS_PER_PERIOD * (1 - 1e-12):
                    raise UsageError(f"fine grid n = {fine} does not resolve eps = {e:g}")
        self.pairing = tuple(SeparableTest.from_config(p, self.dim) for p in self.pairing)

    @classmethod
    def from_dict(cls, cfg):
        known = {k: cfg[k] for k in cls.__dataclass_fields__ if k in cfg}
        unknown = set(cfg) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        if "flux" not in known:
            raise UsageError("config needs a 'flux' entry")
        return cls(**known)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(cfg)

    def to_dict(self):
        out = asdict(self)
        out["pairing"] = [
            {"x": p.x, "y": p.y, "z": p.z, "target": p.target, "component": p.component} for p in self.pairing
        ]
        out["eps_list"] = list(self.eps_list)
        out["norms"] = list(self.norms)
        return out

    def options(self):
        return SolveOptions.from_config(self.solver)


@dataclass
class StudyRow:
    eps: float
    err_lux: float = math.nan
    err_l2: float = math.nan
    err_corrector: float = math.nan
    pairing_gaps: list = field(default_factory=list)
    energy: float = math.nan
    iterations: int = -1
    wall_ms: float = math.nan
    energy_gap: float = math.nan
    norm_w1lphi: float = math.nan
    failed: bool = False
    message: str = ""


@dataclass
class StudyResult:
    rows: list
    rates: dict
    manifest: dict
    u0: ScalarField = None
    triple: object = None

    @property
    def failed(self):
        return [r for r in self.rows if r.failed]


def empirical_rates(rows, key):
    """``log(err_i / err_{i+1}) / log(eps_i / eps_{i+1})`` over consecutive rows
    (``log2`` of the error ratio when eps halves)."""
    out = []
    for a, b in zip(rows, rows[1:]):
        ea, eb = getattr(a, key), getattr(b, key)
        if a.failed or b.failed or not (ea > 0 and eb > 0):
            out.append(math.nan)
        else:
            out.append(math.log(ea / eb) / math.log(a.eps / b.eps))
    return out


def _phi(cfg, a):
    if cfg.nf is not None:
        return nfm.from_config(cfg.nf)
    if a.phi is None:
        return nfm.scaled_power(2)
    return a.phi


def _table(cfg, a, opts):
    t = cfg.table or {}
    r = t.get("r")
    r_grid = np.linspace(r[0], r[1], int(r[2])) if r is not None else None
    return tabulate_q(a, r_grid, t.get("xi_box"), t.get("xi_n"), {"Y": cfg.grids["Y"], "Z": cfg.grids["Z"]}, opts)


def _study_row(cfg, a, phi, u0, triple, limits, eps, opts):
    t0 = time.perf_counter()
    row = StudyRow(eps)
    try:
        grid = fine_grid_for(eps, cfg.dim, cfg.grids.get("fine"))
        ue, res = solve_fine(a, eps, cfg.f, grid, opts, full_output=True)
        u0f = transfer(u0, grid)
        diff = ue - u0f
        if "lux" in cfg.norms:
            row.err_lux = luxemburg_norm(diff, phi)
        if "l2" in cfg.norms:
            row.err_l2 = l2_norm(diff)
        if "w1lphi" in cfg.norms and triple is not None:
            ur = reconstruct(u0, a, eps, None, triple=triple, grid=grid)
            row.err_corrector = orlicz_sobolev_norm(ue - ur, phi)
        row.pairing_gaps = [abs(twoscale_pairing(ue, p, eps) - lim) for p, lim in zip(cfg.pairing, limits)]
        work, load = fine_energy(a, eps, ue, cfg.f)
        row.energy, row.energy_gap = work, work - load
        row.norm_w1lphi = orlicz_sobolev_norm(ue, phi)
        row.iterations = res.iterations
    except HomogError as exc:
        row.failed, row.message = True, f"{type(exc).__name__}: {exc}"
        row.pairing_gaps = [math.nan] * len(cfg.pairing)
    row.wall_ms = (time.perf_counter() - t0) * 1e3 if cfg.timing else 0.0
    return row


def convergence_study(cfg, workers=None):
    """Run a study; rows come back sorted by decreasing eps.

    The homogenized solution, its effective-flux table and the corrector
    triple are computed once. Row failures are recorded, not raised.
    """
    if isinstance(cfg, dict):
        cfg = StudyConfig.from_dict(cfg)
    opts = cfg.options()
    a = flux_from_config(cfg.flux, cfg.dim)
    phi = _phi(cfg, a)
    t0 = time.perf_counter()
    table = _table(cfg, a, opts)
    u0, mres = solve_macro(table, cfg.f, omega_grid(cfg.dim, int(cfg.grids["omega"])), opts, full_output=True)
    need_triple = "w1lphi" in cfg.norms or any(p.target == "grad" for p in cfg.pairing)
    cells = {"Y": cell_grid(cfg.dim, int(cfg.grids["Y"])), "Z": cell_grid(cfg.dim, int(cfg.grids["Z"]))}
    triple = homog_triple(u0, a, cells, opts) if need_triple else None
    limits = [limit_pairing(p, u0, triple) for p in cfg.pairing]
    setup_ms = (time.perf_counter() - t0) * 1e3

    nw = workers or _threads()
    jobs = sorted(cfg.eps_list, reverse=True)
    if nw > 1:
        with ThreadPoolExecutor(nw) as pool:
            rows = list(pool.map(lambda e: _study_row(cfg, a, phi, u0, triple, limits, e, opts), jobs))
    else:
        rows = [_study_row(cfg, a, phi, u0, triple, limits, e, opts) for e in jobs]
    rows.sort(key=lambda r: -r.eps)
    rates = {k: empirical_rates(rows, k) for k in ("err_lux", "err_l2", "err_corrector")}
    manifest = {
        "config": cfg.to_dict(),
        "macro": {"residual": mres.residual_norm, "iterations": mres.iterations},
        "table": table.provenance,
        "setup_ms": setup_ms if cfg.timing else 0.0,
        "rates": rates,
    }
    return StudyResult(rows, rates, manifest, u0, triple)


# -- export ----------------------------------------------------------------------------


def _columns(k):
    return list(FIXED_COLUMNS) + [f"pairing_gap_{i + 1}" for i in range(k)] + list(TAIL_COLUMNS)


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def _csv_text(rows, k):
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(_columns(k))
    for r in rows:
        vals = [r.eps, r.err_lux, r.err_l2, r.err_corrector, *r.pairing_gaps, r.energy, r.iterations, r.wall_ms]
        out.writerow([_fmt(v) for v in vals])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def export(rows, fmt, path, manifest=None, n_pairing=None):
    """Write study rows as CSV (fixed columns) or JSON (rows plus manifest).

    Raises:
        UsageError: unknown format or an I/O failure (the message names the path).
    """
    rows = list(rows)
    k = n_pairing if n_pairing is not None else (len(rows[0].pairing_gaps) if rows else 0)
    if fmt == "csv":
        text = _csv_text(rows, k)
    elif fmt == "json":
        doc = {"columns": _columns(k), "rows": [asdict(r) for r in rows], "manifest": manifest or {}}
        text = json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"
    else:
        raise UsageError(f"unknown export format {fmt!r}")
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from None


def load_rows(path):
    """Reload rows written by :func:`export` in JSON format."""
    with open(path) as fh:
        doc = json.load(fh)
    return [StudyRow(**r) for r in doc["rows"]], doc.get("manifest", {})


def export_plot_data(rows, directory):
    """Two-column ``eps value`` files, one per error column, for gnuplot."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    k = len(rows[0].pairing_gaps) if rows else 0
    cols = {c: (lambda r, c=c: getattr(r, c)) for c in FIXED_COLUMNS[1:]}
    cols.update({f"pairing_gap_{i + 1}": (lambda r, i=i: r.pairing_gaps[i]) for i in range(k)})
    for name, get in cols.items():
        p = os.path.join(directory, f"{name}.dat")
        with open(p, "w") as fh:
            fh.write(f"# eps {name}\n")
            for r in rows:
                fh.write(f"{_fmt(r.eps)} {_fmt(get(r))}\n")
        paths.append(p)
    return paths


def write_outputs(result: StudyResult, output):
    if output.get("csv"):
        export(result.rows, "csv", output["csv"], result.manifest)
    if output.get("json"):
        export(result.rows, "json", output["json"], result.manifest)
    if output.get("plot_dir"):
        export_plot_data(result.rows, output["plot_dir"])


# -- consistency of the three decoupled systems -----------------------------------------


def three_system_residuals(u0, q_source, triple, a, f, opts=None):
    """Residual norms of the macro, outer and inner systems at computed ``(u0, pi1, pi2)``.

    Nothing is re-solved: the stored correctors are plugged into each
    discrete weak form and tested against every basis function.
    """
    from . import fem
    from .cell import _InnerBatch
    from .solver import _q_eval

    opts = opts or SolveOptions()
    grid = u0.grid
    d = grid.dim
    q = _q_eval(q_source)(grid.values_at_quad(u0.values).ravel(), grid.grad_at_quad(u0.values).reshape(-1, d))[0]
    macro = fem.residual(grid, q.reshape(grid.ncell, grid.nq, d), source_at_quad(f, grid))
    gy, gz = triple.grid_Y, triple.grid_Z
    ys = gy.quad_points.reshape(-1, d)
    outer_max = inner_max = 0.0
    for c in range(len(triple.states)):
        r, xi = triple.states[c, 0], triple.states[c, 1:]
        lam_y = (xi + gy.grad_at_quad(triple.outer[c])).reshape(-1, d)
        batch = _InnerBatch(a, gz, ys, r, opts.jacobian)
        x = triple.inner[c].ravel()
        lam = batch.lam(x, lam_y)
        inner = fem.residual(gz, batch.flux(lam))
        h = batch.average(batch.flux(lam))
        outer = fem.residual(gy, h.reshape(gy.ncell, gy.nq, d))
        inner_max = max(inner_max, float(np.abs(inner).max()))
        outer_max = max(outer_max, float(np.abs(outer).max()))
    return {"macro": float(np.abs(macro).max()), "outer": outer_max, "inner": inner_max}


def cli_main(argv=None):
    from .cli import main

    return main(argv)
