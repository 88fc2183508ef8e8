"""Command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 when any
per-eps stage (or a self test) fails. Logs go to standard error; machine
output goes to files under ``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import build_spec, default_config, parse_config
from .errors import ConfigError, HomogLabError

log = logging.getLogger("homoglab")

EXIT_OK, EXIT_CONFIG, EXIT_FAILED = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _global_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON study configuration (defaults if omitted)")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads in study runs")
    common.add_argument("--print-defaults", action="store_true", default=argparse.SUPPRESS,
                        help="print the default configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="homoglab", parents=[common],
                     description="Periodic homogenization lab for perforated-domain reaction-diffusion systems.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("cell", parents=[common], help="cell problems and effective quantities")
    sub.add_parser("macro", parents=[common], help="homogenized (macro) problem")
    p = sub.add_parser("micro", parents=[common], help="single fine-scale solve")
    p.add_argument("--eps", type=float, required=True)
    sub.add_parser("study", parents=[common], help="full corrector convergence study")
    sub.add_parser("mms", parents=[common], help="manufactured-solution self test")
    p = sub.add_parser("check-cutoff", parents=[common], help="cut-off function diagnostics")
    p.add_argument("--eps", type=float, nargs="+", help="eps values (default: the config's eps_list)")
    return parser


def _spec(args):
    return parse_config(args.config) if args.config else build_spec(default_config())


def _out(args) -> Path:
    out = Path(getattr(args, "out", "homoglab-output"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _timed(label):
    class _T:
        def __enter__(self):
            self.t = time.perf_counter()

        def __exit__(self, *exc):
            log.info("%s: %.2f s", label, time.perf_counter() - self.t)
    return _T()


def cmd_cell(args) -> int:
    from .homogenize import solve_cells
    from .mesh import build_unit_cell_mesh

    spec = _spec(args)
    with _timed("cell stage"):
        mesh = build_unit_cell_mesh(spec.cell, spec.cell_h)
        cells = solve_cells(mesh, spec.diffusion, spec.deposition_a, spec.deposition_b,
                            tol=spec.cg_tol, max_iter=spec.cg_max_iter)
    out = _out(args) / "cells"
    cells.save(out)
    for i, s in enumerate(cells.species):
        log.info("species %d: d_hat=%s A=%.6g B=%.6g", i + 1, np.array2string(s.d_hat, precision=6), s.A, s.B)
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_macro(args) -> int:
    from .corrector import shared_stage
    from .mesh import write_mesh

    spec = _spec(args)
    with _timed("cell and macro stages"):
        shared = shared_stage(spec)
    out = _out(args)
    shared.cells.save(out / "cells")
    write_mesh(shared.macro.mesh, out / "macro_mesh.txt")
    np.savetxt(out / "macro_u0.txt", np.column_stack(shared.macro.u0), fmt="%.17g",
               header=" ".join(f"u0_species{i + 1}" for i in range(spec.n_species)))
    log.info("macro Picard steps: %d; wrote %s", shared.macro.picard.iterations, out)
    return EXIT_OK


def cmd_micro(args) -> int:
    from .corrector import solve_micro
    from .geometry import PerforatedDomainGeometry
    from .mesh import build_unit_cell_mesh, tile_perforated_mesh, write_mesh

    spec = _spec(args)
    try:
        PerforatedDomainGeometry(spec.cell, args.eps)
    except HomogLabError as exc:
        raise ConfigError("eps", str(exc)) from None
    with _timed(f"micro solve eps={args.eps:g}"):
        cell = build_unit_cell_mesh(spec.cell, spec.cell_h)
        fine = tile_perforated_mesh(cell, args.eps)
        sol = solve_micro(args.eps, spec, fine, cell_mesh=cell)
    out = _out(args)
    write_mesh(fine, out / "micro_mesh.txt")
    np.savetxt(out / "micro_u.txt", np.column_stack(sol.fields), fmt="%.17g",
               header=" ".join(f"u_species{i + 1}" for i in range(spec.n_species)))
    summary = {"eps": args.eps, "vertices": fine.n_vertices, "picard_iters": sol.picard.iterations,
               "picard_trace": sol.picard.trace, "cg_iters": sol.cg_iterations,
               "linf": [float(np.abs(u).max()) for u in sol.fields]}
    (out / "micro_summary.json").write_text(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_study(args) -> int:
    from .corrector import emit_report, run_study

    spec = _spec(args)
    with _timed("study"):
        report = run_study(spec, threads=getattr(args, "threads", 1))
    out = _out(args)
    emit_report(report, out, spec.formats)
    fit = report.fits.get("aggregate")
    if fit is not None:
        log.info("aggregate slope %.4f, intercept %.4f, R^2 %.4f", fit["slope"], fit["intercept"], fit["r2"])
    log.info("wrote report to %s", out)
    return EXIT_OK if report.ok else EXIT_FAILED


def cmd_mms(args) -> int:
    from .mms import run_mms

    with _timed("mms"):
        res = run_mms()
    for h, a, b in zip(res.h, res.h1_errors, res.l2_errors):
        print(f"h={h:.6f}  H1 error={a:.6e}  L2 error={b:.6e}")
    print(f"H1 slope {res.h1_slope:.4f} (band {res.bands['h1']})")
    print(f"L2 slope {res.l2_slope:.4f} (band {res.bands['l2']})")
    print("PASS" if res.passed else "FAIL")
    return EXIT_OK if res.passed else EXIT_FAILED


def cmd_check_cutoff(args) -> int:
    from .corrector import cutoff_ratios
    from .geometry import cells_per_side

    eps_list = args.eps if args.eps else _spec(args).eps_list
    for e in eps_list:
        try:
            cells_per_side(e)
        except HomogLabError:
            raise ConfigError("eps", "1/eps must be an integer") from None
    rows = [(e, *cutoff_ratios(e)) for e in eps_list]
    base = rows[0]
    ok = True
    print("eps ratio_l2 ratio_grad")
    for e, r1, r2 in rows:
        print(f"{e:.6g} {r1:.6f} {r2:.6f}")
        ok &= (0.5 * base[1] < r1 < 2 * base[1]) and (0.5 * base[2] < r2 < 2 * base[2])
    if hasattr(args, "out"):
        out = _out(args)
        lines = ["eps,cutoff_ratio_l2,cutoff_ratio_grad"] + [f"{e!r},{a!r},{b!r}" for e, a, b in rows]
        (out / "cutoff.csv").write_text("\n".join(lines) + "\n")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAILED


COMMANDS = {"cell": cmd_cell, "macro": cmd_macro, "micro": cmd_micro, "study": cmd_study,
            "mms": cmd_mms, "check-cutoff": cmd_check_cutoff}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if getattr(args, "print_defaults", False):
        print(json.dumps(default_config(), indent=2))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "threads", 1) < 1:
        print("homoglab: error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"homoglab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HomogLabError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILED


def main() -> None:
    sys.exit(dispatch())
