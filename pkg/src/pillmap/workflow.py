"""
End-to-end runs driven by a :class:`~pillmap.config.RunConfig`.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .grid import DesignVector, GridSpec, project_field
from .io import FIVE_BAR, generate_target, load_target
from .objective import TargetField
from .pipeline import (
    HeuristicReport,
    RefinementResult,
    apply_heuristics,
    cross_init,
    default_cross_shape,
    randomized_cross_init,
    refine_loop,
    run_staged,
)

log = logging.getLogger(__name__)


def build_target(cfg: RunConfig, grid: GridSpec | None = None, path=None) -> TargetField:
    """Target from ``path``, the configured file, explicit pills or the preset."""
    grid = grid or cfg.grid
    t = cfg.target
    if path is not None or t.path is not None:
        return load_target(path or t.path, t.format, grid)
    if t.pills is not None:
        return generate_target(np.array(t.pills, dtype=float), grid, cfg.transition)
    if t.preset == "five_bar":
        return generate_target(FIVE_BAR, grid, cfg.transition)
    raise ValueError("no target: set target.path, target.pills or target.preset")


def build_init(cfg: RunConfig, grid: GridSpec | None = None) -> DesignVector:
    grid = grid or cfg.grid
    ic = cfg.init
    rows, cols = default_cross_shape(ic.n)
    rows = ic.rows or rows
    cols = ic.cols or cols
    cons = cfg.constraint_set(grid)
    if ic.mode == "cross":
        return cross_init(rows, cols, ic.n, ic.r0, cons.l_max, grid.bounds, cons=cons)
    return randomized_cross_init(rows, cols, ic.n, ic.r0, cons.l_max, grid.bounds,
                                 theta_max=math.radians(ic.theta_max), seed=cfg.seed, cons=cons)


@dataclass
class RunResult:
    design: DesignVector
    target: TargetField
    density: np.ndarray
    trace: list
    stages: list
    objective: float
    heuristics: HeuristicReport | None = None
    refinement: RefinementResult | None = None
    seconds: float = 0.0

    @property
    def f_norm(self) -> float:
        g = self.target.grid
        return self.objective / (g.nx * g.ny)

    @property
    def eval_count(self) -> int:
        return self.trace[-1][0] if self.trace else 0


def tracking_value(design, target: TargetField, cfg: RunConfig) -> tuple[float, np.ndarray]:
    dens = project_field(design, cfg.transition, cfg.aggregator, target.grid).values
    return float(np.sum((target.values - dens) ** 2)), dens


def run_pipeline(cfg: RunConfig, target: TargetField | None = None, init: DesignVector | None = None,
                 threads: int | None = None) -> RunResult:
    """Staged optimization with optional heuristics and refinement."""
    t0 = time.perf_counter()
    target = target or build_target(cfg)
    grid = target.grid
    threads = cfg.threads if threads is None else threads
    cons = cfg.constraint_set(grid)
    opts = cfg.solve_options()
    init = init or build_init(cfg, grid)
    report = {}

    def between(i, design):
        if cfg.apply_heuristics and i == len(cfg.stages) - 1:
            design, report["h"] = apply_heuristics(design, cfg.transition, grid, cfg.heuristics)
        return design

    res = run_staged(target, init, cfg.stages, tspec=cfg.transition, aspec=cfg.aggregator,
                     cons=cons, opts=opts, threads=threads, between=between)
    design, trace = res.design, list(res.trace)
    ref = None
    if cfg.apply_refinement:
        ref = refine_loop(target, design, cfg.refinement, tspec=cfg.transition, aspec=cfg.aggregator,
                          cons=cons, stages=cfg.stages, opts=opts, threads=threads)
        if ref.design is not None:
            design = ref.design
    F, dens = tracking_value(design, target, cfg)
    return RunResult(design, target, dens, trace, res.stages, F, report.get("h"), ref,
                     time.perf_counter() - t0)


def with_grid(cfg: RunConfig, **kw) -> RunConfig:
    return dataclasses.replace(cfg, grid=dataclasses.replace(cfg.grid, **kw))
