"""
Command-line interface.

Exit codes: 0 success, 1 invalid input (config, files, arguments),
2 runtime or solver failure, 3 failed derivative check.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config
from .gradcheck import module_report
from .io import FormatError, read_pills, write_outputs, write_pills
from .pipeline import apply_heuristics, cross_init, default_cross_shape, randomized_cross_init, refine_loop
from .solver import SolverError
from .studies import STUDIES, run_study, write_rows
from .workflow import build_target, run_pipeline, tracking_value

log = logging.getLogger("pillmap")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = dataclasses.replace(cfg, threads=args.threads)
    return cfg


def _with_target_path(cfg: RunConfig, path) -> RunConfig:
    if path is None:
        return cfg
    return dataclasses.replace(cfg, target=dataclasses.replace(cfg.target, path=str(path)))


def _emit(outdir, design, target, density, trace, cfg, figures=True):
    files = write_outputs(outdir, design, target, density, trace, dump_config(cfg))
    if figures:
        from .plotting import write_figures

        files += write_figures(outdir, design, target, density, trace)
    return files


# ------------------------------------------------------------- subcommands


def cmd_run(args) -> int:
    cfg = _with_target_path(_config(args), args.target)
    # load everything before touching the output directory
    target = build_target(cfg)
    res = run_pipeline(cfg, target)
    outdir = args.out or cfg.output_dir
    _emit(outdir, res.design, target, res.density, res.trace, cfg, not args.no_figures)
    print(f"pills={len(res.design)} F={res.objective:.6g} F_norm={res.f_norm:.6g} "
          f"evals={res.eval_count} out={outdir}")
    return EXIT_OK


def cmd_init(args) -> int:
    cfg = _config(args)
    grid = cfg.grid
    cons = cfg.constraint_set()
    rows, cols = default_cross_shape(args.n)
    rows, cols = args.rows or rows, args.cols or cols
    if args.mode == "cross":
        design = cross_init(rows, cols, args.n, args.r0, cons.l_max, grid.bounds, cons=cons)
    else:
        design = randomized_cross_init(rows, cols, args.n, args.r0, cons.l_max, grid.bounds,
                                       theta_max=math.radians(args.theta_max), seed=args.seed, cons=cons)
    write_pills(args.out, design)
    print(f"wrote {len(design)} pills to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    g = cfg.grid
    # objective-level checks on a coarse copy of the configured grid
    nx = min(g.nx, 24)
    ny = max(2, round(nx * g.ny / g.nx))
    coarse = g.with_(nx=nx, ny=ny)
    summaries = module_report(cfg.transition, cfg.aggregator, coarse, samples=args.samples, seed=cfg.seed)
    print(f"{'module':<12}{'checks':>8}{'inactive':>10}{'max grad err':>15}{'max hess err':>15}  status")
    for s in summaries:
        print(f"{s.module:<12}{s.checks:>8}{s.inactive:>10}{s.max_grad_error:>15.3e}"
              f"{s.max_hess_error:>15.3e}  {'ok' if s.passed else 'FAIL'}")
    return EXIT_OK if all(s.passed for s in summaries) else EXIT_GRADCHECK


def cmd_refine(args) -> int:
    cfg = _with_target_path(_config(args), args.target)
    target = build_target(cfg)
    design = read_pills(args.pills)
    res = refine_loop(target, design, cfg.refinement, tspec=cfg.transition, aspec=cfg.aggregator,
                      cons=cfg.constraint_set(), stages=cfg.stages, opts=cfg.solve_options(),
                      threads=cfg.threads)
    final = res.design if res.design is not None else design
    F, dens = tracking_value(final, target, cfg)
    outdir = Path(args.out or cfg.output_dir)
    _emit(outdir, final, target, dens, [(0, F, 0)], cfg, not args.no_figures)
    with open(outdir / "refinement.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "mask_elements", "J_before", "J_after", "accepted"])
        for a in res.audit:
            w.writerow([a["k"], a["mask_elements"], repr(a["J_before"]), repr(a.get("J_after", "")),
                        int(a["accepted"])])
    print(f"refinement stopped ({res.reason}); pills={len(final)} MSE={res.J:.6g} out={outdir}")
    return EXIT_OK


def cmd_heuristics(args) -> int:
    cfg = _config(args)
    design = read_pills(args.pills)
    out, rep = apply_heuristics(design, cfg.transition, cfg.grid, cfg.heuristics)
    outdir = Path(args.out or cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_pills(outdir / "pills_heuristics.csv", out)
    with open(outdir / "heuristics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "AR", "UR"])
        for i, (a, u) in enumerate(zip(rep.AR, rep.UR)):
            w.writerow([i, repr(float(a)), repr(float(u))])
    print(f"{'id':>3}{'AR':>12}{'UR':>12}")
    for i, (a, u) in enumerate(zip(rep.AR, rep.UR)):
        print(f"{i:>3}{a:>12.4g}{u:>12.4g}")
    note = " (highest-AR pill restored)" if rep.restored else ""
    print(f"pills {rep.n_before} -> {rep.n_pruned} after pruning -> {rep.n_after} after merging{note}")
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = _config(args)
    rows = run_study(args.name, cfg)
    outdir = Path(args.out or cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / f"study_{args.name}.csv"
    write_rows(path, rows)
    for r in rows:
        print(", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    print(f"wrote {path}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="worker threads for field evaluation")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pillmap", description="Reconstruct density fields with pill-shaped bars.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", parents=[common], help="staged pipeline end to end")
    s.add_argument("--config", required=True)
    s.add_argument("--target", help="target field (.csv or .pgm); overrides the config")
    s.add_argument("--out", help="output directory (default: output_dir from the config)")
    s.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("init", parents=[common], help="write an initial pill table")
    s.add_argument("--mode", choices=("cross", "randcross"), default="cross")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--rows", type=int)
    s.add_argument("--cols", type=int)
    s.add_argument("--r0", type=float, default=0.05)
    s.add_argument("--theta-max", type=float, default=10.0, help="degrees, randcross only")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="config supplying grid and constraints")
    s.add_argument("--out", default="pills.csv")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference report per module")
    s.add_argument("--config", required=True)
    s.add_argument("--samples", type=int, default=20)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("refine", parents=[common], help="refinement loop on an existing design")
    s.add_argument("--config", required=True)
    s.add_argument("--pills", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--out")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("heuristics", parents=[common], help="area/uniqueness ratios, prune and merge")
    s.add_argument("--pills", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_heuristics)

    s = sub.add_parser("study", parents=[common], help="parameter sweeps with a summary CSV")
    s.add_argument("name", choices=STUDIES)
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_study)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SolverError, OSError, np.linalg.LinAlgError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
