"""Command line front end: ``reiterhom <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 convergence
failure, 4 hypothesis check failure under ``--strict``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

import numpy as np

from . import nfunction as nfm
from .cell import EffectiveFluxTable, solve_inner_cell, solve_outer_cell, tabulate_q
from .errors import ConvergenceError, DomainError, HomogError, OutOfRangeError, UsageError
from .flux import Sampler, flux_from_config, verify_hypotheses
from .grid import cell_grid, omega_grid, write_field
from .harness import StudyConfig, convergence_study, write_outputs
from .newton import SolveOptions
from .solver import fine_grid_for, solve_fine, solve_macro

EXIT_OK, EXIT_USAGE, EXIT_CONVERGENCE, EXIT_HYPOTHESIS = 0, 2, 3, 4


def _load(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None


def _flux(cfg):
    if "flux" not in cfg:
        raise UsageError("config needs a 'flux' entry")
    return flux_from_config(cfg["flux"], int(cfg.get("dim", 1)))


def _grids(cfg, default=128):
    g = cfg.get("grids", {})
    d = int(cfg.get("dim", 1))
    return cell_grid(d, int(g.get("Y", default))), cell_grid(d, int(g.get("Z", default)))


def _fmt(v):
    return " ".join(format(float(x), ".10g") for x in np.atleast_1d(v))


def _manifest(path, **kw):
    if path:
        with open(path, "w") as fh:
            json.dump(kw, fh, indent=2, sort_keys=True, default=float)


def cmd_nf_check(args):
    if args.csv:
        nf = nfm.load_tabulated_csv(args.csv)
    else:
        cfg = {"family": args.family}
        if args.p is not None:
            cfg["p"] = args.p
        nf = nfm.from_config(cfg)
    idx = nfm.simonenko_indices(nf)
    d2 = nfm.check_delta2(nf)
    print(f"family: {nf.family}")
    print(f"indices: ({idx.lower:.10g}, {idx.upper:.10g})")
    print(f"delta2: {'pass' if d2.passes else 'fail'} alpha {d2.alpha:.10g}")
    pair = nfm.nf_conjugate(nf)
    t = np.array([0.5, 1.0, 2.0])
    t = t[t < nf.t_max]
    gap = pair.young_gap(pair.primal.density(t), t) if t.size else np.array([])
    print(f"conjugate: {pair.construction}; young equality gap at t={_fmt(t)}: {_fmt(gap)}")
    return EXIT_OK


def cmd_verify_flux(args):
    cfg = _load(args.config)
    a = _flux(cfg)
    rep = verify_hypotheses(a, Sampler(n_points=args.n_points, seed=args.seed))
    for line in rep.summary_lines():
        print(line)
    if args.strict and not rep.passed:
        return EXIT_HYPOTHESIS
    return EXIT_OK


def cmd_solve_cell(args):
    cfg = _load(args.config)
    a = _flux(cfg)
    opts = SolveOptions.from_config(cfg.get("solver"))
    gy, gz = _grids(cfg, args.n or 256)
    t0 = time.perf_counter()
    if args.level == "inner":
        y = args.y if args.y is not None else [0.0] * a.dim
        sol = solve_inner_cell(a, y, args.r, args.xi, gz, opts)
    else:
        sol = solve_outer_cell(a, args.r, args.xi, (gy, gz), opts)
    print(f"averaged flux: {_fmt(sol.averaged_flux)}")
    print(f"residual: {sol.residual_norm:.3e} iterations: {sol.iterations}")
    if args.out:
        write_field(sol.corrector, args.out)
    _manifest(args.manifest, level=args.level, averaged_flux=sol.averaged_flux.tolist(),
              residual=sol.residual_norm, iterations=sol.iterations,
              wall_ms=(time.perf_counter() - t0) * 1e3)
    return EXIT_OK


def _table_from(cfg, a, opts):
    t = cfg.get("table", {})
    r = t.get("r")
    r_grid = np.linspace(r[0], r[1], int(r[2])) if r else None
    g = cfg.get("grids", {})
    return tabulate_q(a, r_grid, t.get("xi_box"), t.get("xi_n"), {"Y": int(g.get("Y", 64)), "Z": int(g.get("Z", 64))}, opts)


def cmd_tabulate(args):
    cfg = _load(args.config)
    a = _flux(cfg)
    table = _table_from(cfg, a, SolveOptions.from_config(cfg.get("solver")))
    table.write(args.out)
    print(f"tabulated {table.values[..., 0].size} nodes -> {args.out}")
    return EXIT_OK


def cmd_macro(args):
    cfg = _load(args.config)
    opts = SolveOptions.from_config(cfg.get("solver"))
    t0 = time.perf_counter()
    if args.table:
        table = EffectiveFluxTable.read(args.table)
    else:
        table = _table_from(cfg, _flux(cfg), opts)
    d = int(cfg.get("dim", 1))
    grid = omega_grid(d, int(cfg.get("grids", {}).get("omega", 128)))
    u0, res = solve_macro(table, cfg.get("f", 1.0), grid, opts, full_output=True)
    print(f"macro: residual {res.residual_norm:.3e} iterations {res.iterations} max|u0| {np.abs(u0.values).max():.10g}")
    if args.out:
        write_field(u0, args.out)
    _manifest(args.manifest, options=cfg.get("solver", {}), residual=res.residual_norm,
              iterations=res.iterations, wall_ms=(time.perf_counter() - t0) * 1e3)
    return EXIT_OK


def cmd_fine(args):
    cfg = _load(args.config)
    a = _flux(cfg)
    opts = SolveOptions.from_config(cfg.get("solver"))
    t0 = time.perf_counter()
    eps = args.eps if args.eps is not None else float(cfg.get("eps", 0.25))
    grid = fine_grid_for(eps, a.dim, cfg.get("grids", {}).get("fine"))
    u, res = solve_fine(a, eps, cfg.get("f", 1.0), grid, opts, full_output=True)
    print(f"fine eps={eps:g} n={grid.n}: residual {res.residual_norm:.3e} iterations {res.iterations}")
    if args.out:
        write_field(u, args.out)
    _manifest(args.manifest, eps=eps, n=grid.n, options=cfg.get("solver", {}), residual=res.residual_norm,
              iterations=res.iterations, wall_ms=(time.perf_counter() - t0) * 1e3)
    return EXIT_OK


def cmd_study(args):
    cfg = StudyConfig.load(args.config)
    result = convergence_study(cfg)
    for r in result.rows:
        status = "FAILED " + r.message if r.failed else ""
        print(f"eps={r.eps:<10g} err_lux={r.err_lux:.4e} err_l2={r.err_l2:.4e} "
              f"err_corrector={r.err_corrector:.4e} {status}".rstrip())
    for k, v in result.rates.items():
        print(f"rate {k}: {_fmt(v) if v else '-'}")
    write_outputs(result, cfg.output)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="reiterhom", description="Reiterated homogenization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("nf-check", help="growth indices, Delta2 and conjugate checks of an N-function")
    s.add_argument("--family", default="power")
    s.add_argument("--p", type=float)
    s.add_argument("--csv", help="tabulated N-function (columns t, Phi)")
    s.set_defaults(fn=cmd_nf_check)

    s = sub.add_parser("verify-flux", help="sample the structural hypotheses of a flux")
    s.add_argument("--config", required=True)
    s.add_argument("--strict", action="store_true", help="exit 4 when a hypothesis fails")
    s.add_argument("--n-points", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_verify_flux)

    s = sub.add_parser("solve-cell", help="solve one inner or outer cell problem")
    s.add_argument("--level", choices=("inner", "outer"), required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--xi", type=float, nargs="+", required=True)
    s.add_argument("--r", type=float, default=0.0)
    s.add_argument("--y", type=float, nargs="+")
    s.add_argument("--n", type=int, help="cells per axis when the config gives no grids")
    s.add_argument("--out", help="corrector CSV")
    s.add_argument("--manifest")
    s.set_defaults(fn=cmd_solve_cell)

    s = sub.add_parser("tabulate", help="tabulate the effective flux")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_tabulate)

    s = sub.add_parser("macro", help="solve the homogenized problem")
    s.add_argument("--config", required=True)
    s.add_argument("--table", help="reuse a table written by 'tabulate'")
    s.add_argument("--out")
    s.add_argument("--manifest")
    s.set_defaults(fn=cmd_macro)

    s = sub.add_parser("fine", help="solve the oscillating problem for one eps")
    s.add_argument("--config", required=True)
    s.add_argument("--eps", type=float)
    s.add_argument("--out")
    s.add_argument("--manifest")
    s.set_defaults(fn=cmd_fine)

    s = sub.add_parser("study", help="run a convergence study")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_study)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.fn(args)
    except (UsageError, DomainError, OutOfRangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except HomogError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
