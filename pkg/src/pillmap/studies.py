"""
Parameter sweeps over the staged pipeline: mesh resolution, quadrature
order, Hessian mode and pill count.  Each returns a list of row dicts and
can write them as CSV.
"""

from __future__ import annotations

import csv
import dataclasses

from .config import RunConfig
from .workflow import build_target, run_pipeline, with_grid

STUDIES = ("resolution", "quadrature", "hessian", "count")


def _row(result, **extra) -> dict:
    return {
        **extra,
        "n_pills": len(result.design),
        "F": result.objective,
        "F_norm": result.f_norm,
        "evals": result.eval_count,
        "seconds": round(result.seconds, 3),
    }


def _needs_synthetic(cfg: RunConfig):
    if cfg.target.path is not None:
        raise ValueError("this study regenerates the target per grid; use target.pills or target.preset")


def resolution_study(cfg: RunConfig, sizes=((40, 20), (80, 40), (120, 60))) -> list[dict]:
    """Same run on several meshes; the target is rasterized on each mesh."""
    _needs_synthetic(cfg)
    rows = []
    for nx, ny in sizes:
        c = with_grid(cfg, nx=nx, ny=ny)
        rows.append(_row(run_pipeline(c, build_target(c)), nx=nx, ny=ny))
    return rows


def quadrature_study(cfg: RunConfig, orders=(1, 3, 5)) -> list[dict]:
    """Same run with several quadrature orders on the configured mesh."""
    _needs_synthetic(cfg)
    rows = []
    for q in orders:
        c = with_grid(cfg, quad_order=q)
        rows.append(_row(run_pipeline(c, build_target(c)), quad_order=q))
    return rows


def hessian_study(cfg: RunConfig, modes=("exact", "lbfgs")) -> list[dict]:
    target = build_target(cfg)
    rows = []
    for m in modes:
        c = dataclasses.replace(cfg, solver=dataclasses.replace(cfg.solver, hessian_mode=m))
        rows.append(_row(run_pipeline(c, target), hessian_mode=m,
                         history=c.solver.lbfgs_history if m == "lbfgs" else ""))
    return rows


def count_study(cfg: RunConfig, counts=(3, 5, 8, 13, 18)) -> list[dict]:
    target = build_target(cfg)
    rows = []
    for n in counts:
        c = dataclasses.replace(cfg, init=dataclasses.replace(cfg.init, n=n, rows=None, cols=None))
        rows.append(_row(run_pipeline(c, target), n_init=n))
    return rows


def run_study(name: str, cfg: RunConfig) -> list[dict]:
    funcs = {
        "resolution": resolution_study,
        "quadrature": quadrature_study,
        "hessian": hessian_study,
        "count": count_study,
    }
    if name not in funcs:
        raise ValueError(f"unknown study {name!r}; expected one of {STUDIES}")
    return funcs[name](cfg)


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (format(v, ".17g") if isinstance(v, float) else v) for k, v in r.items()})
