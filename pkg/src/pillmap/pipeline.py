"""
Initialization, staged optimization, pruning/merging heuristics and the
residual-guided refinement loop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .aggregation import AggregatorSpec
from .geometry import PillParams
from .grid import DesignVector, ElementField, GridSpec, evaluate_design, project_field
from .objective import ConstraintSet, Objective, TargetField, residual_mask
from .solver import SolveOptions, SolverError, minimize, project_feasible
from .transition import TransitionSpec

log = logging.getLogger(__name__)

OBJECTIVE_KINDS = ("reward", "tracking")


# ---------------------------------------------------------------- configs


@dataclass(frozen=True)
class StageConfig:
    """One stage of the staged schedule.

    Parameters
    ----------
    objective : {"reward", "tracking"}
    ext : float
        Radius inflation used inside distance evaluation only.
    tol, max_iter : solver settings for this stage
    radius_frozen : bool
        Exclude radii from the free variables.
    fixed_radius : float, optional
        Value every radius is set to before a frozen-radius stage.
    tspec, aspec : optional overrides of the run-wide specs
    """

    objective: str = "tracking"
    ext: float = 0.0
    tol: float = 1e-7
    max_iter: int = 100
    radius_frozen: bool = False
    fixed_radius: float | None = None
    tspec: TransitionSpec | None = None
    aspec: AggregatorSpec | None = None

    def __post_init__(self):
        if self.objective not in OBJECTIVE_KINDS:
            raise ValueError(f"stage objective must be one of {OBJECTIVE_KINDS}")
        if self.ext < 0:
            raise ValueError("stage ext must be non-negative")
        if not self.tol > 0 or int(self.max_iter) < 1:
            raise ValueError("stage needs tol > 0 and max_iter >= 1")
        if self.fixed_radius is not None and not self.fixed_radius > 0:
            raise ValueError("fixed_radius must be positive")


def default_stages() -> list[StageConfig]:
    """Exploration, bridging and convergence stages of the default preset."""
    return [
        StageConfig("reward", ext=0.5, tol=1e-2, radius_frozen=True, fixed_radius=0.05),
        StageConfig("tracking", ext=0.1, tol=1e-3),
        StageConfig("tracking", ext=0.0, tol=1e-7),
    ]


@dataclass(frozen=True)
class HeuristicConfig:
    ar_min: float = 0.15
    ur_min: float = 1e-4
    theta_lim: float = 10.0  # degrees
    d_min: float = 0.15
    proximity: str = "center"  # or "segment"

    def __post_init__(self):
        if min(self.ar_min, self.ur_min, self.theta_lim, self.d_min) < 0:
            raise ValueError("heuristic thresholds must be non-negative")
        if self.proximity not in ("center", "segment"):
            raise ValueError("proximity must be 'center' or 'segment'")


@dataclass(frozen=True)
class RefinementConfig:
    tau_res: float = 0.2
    r_seed: float = 0.05
    fixed_r: float | None = None
    K_max: int = 5
    eps_abs: float = 0.0
    eps_rel: float = 1e-3

    def __post_init__(self):
        if int(self.K_max) < 1:
            raise ValueError("K_max must be >= 1")
        if not 0.0 < self.tau_res < 1.0:
            raise ValueError("tau_res must lie in (0, 1)")
        if not self.r_seed > 0:
            raise ValueError("r_seed must be positive")


# ---------------------------------------------------------- initialization


def _cross_segments(rows: int, cols: int, n: int, l_max, box):
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    if n < 1 or n > 2 * rows * cols:
        raise ValueError(f"n={n} exceeds the capacity 2*R*C={2 * rows * cols} of the cross grid")
    xmin, ymin, xmax, ymax = box
    dx, dy = (xmax - xmin) / cols, (ymax - ymin) / rows
    diag = math.hypot(dx, dy)
    L = 0.95 * diag if l_max is None else min(0.95 * diag, l_max)
    u = np.array([dx, dy]) / diag
    v = np.array([dx, -dy]) / diag
    segs = []
    for j in range(rows):
        for i in range(cols):
            c = np.array([xmin + (i + 0.5) * dx, ymin + (j + 0.5) * dy])
            for w in (u, v):
                if len(segs) < n:
                    segs.append((c, 0.5 * L * w))
    return segs


def default_cross_shape(n: int) -> tuple[int, int]:
    """Smallest square cell grid holding ``n`` pills (two per cell)."""
    s = max(1, math.ceil(math.sqrt(math.ceil(n / 2))))
    return s, s


def cross_init(rows: int, cols: int, n: int, r0: float, l_max=None, domain=(0.0, 0.0, 1.0, 1.0),
               cons: ConstraintSet | None = None) -> DesignVector:
    """Two diagonal segments per cell of a ``rows x cols`` partition of ``domain``.

    Cells are visited row by row from the bottom-left; in each cell the
    ``(dx, dy)`` diagonal precedes the ``(dx, -dy)`` one.  Pills are
    projected onto the admissible set of ``cons`` (box only when omitted).
    """
    return randomized_cross_init(rows, cols, n, r0, l_max, domain, theta_max=0.0, cons=cons)


def randomized_cross_init(rows: int, cols: int, n: int, r0: float, l_max=None,
                          domain=(0.0, 0.0, 1.0, 1.0), theta_max: float = 0.0, seed: int = 0,
                          cons: ConstraintSet | None = None) -> DesignVector:
    """Cross seeding with each diagonal rotated about its center by ``U(-theta_max, theta_max)``.

    ``theta_max`` is in radians.
    """
    if not r0 > 0:
        raise ValueError("r0 must be positive")
    if cons is None:
        cons = ConstraintSet(box=tuple(domain), r_min=0.0, l_min=0.0)
    rng = np.random.default_rng(seed)
    Z = []
    for c, h in _cross_segments(rows, cols, n, l_max, domain):
        if theta_max > 0:
            t = rng.uniform(-theta_max, theta_max)
            ct, st = math.cos(t), math.sin(t)
            h = np.array([ct * h[0] - st * h[1], st * h[0] + ct * h[1]])
        Z.append([*(c - h), *(c + h), r0])
    x = project_feasible(np.array(Z, dtype=float).ravel(), cons, margin=0.0)
    return DesignVector.from_array(x)


# ------------------------------------------------------------ staged runs


@dataclass
class StageReport:
    index: int
    objective: str
    start: float
    end: float
    evals: int
    iterations: int
    termination: str
    accepted: bool


@dataclass
class StagedResult:
    design: DesignVector
    trace: list  # (eval_index, objective, stage) rows
    stages: list = field(default_factory=list)

    @property
    def eval_count(self) -> int:
        return self.trace[-1][0] if self.trace else 0


def _stage_design(design: DesignVector, st: StageConfig) -> DesignVector:
    if not st.radius_frozen:
        return design
    Z = design.matrix().copy()
    if st.fixed_radius is not None:
        Z[:, 4] = st.fixed_radius
    return DesignVector.from_array(Z, [True] * len(design))


def run_staged(target: TargetField, init: DesignVector, stages, *, tspec: TransitionSpec,
               aspec: AggregatorSpec, cons: ConstraintSet, opts: SolveOptions | None = None,
               threads: int = 1, between=None) -> StagedResult:
    """Run ``stages`` sequentially with warm starts.

    A stage whose final objective exceeds its initial one is rolled back to
    its warm start.  Solver errors are logged and the stage is skipped.
    ``between(i, design) -> design`` is called before stage ``i > 0``.
    Per-pill frozen-radius flags of ``init`` are honoured by stages that do
    not freeze radii themselves; the returned design has all flags cleared.
    """
    stages = list(stages)
    if not stages:
        raise ValueError("at least one stage is required")
    if len(init) == 0:
        raise ValueError("initial design is empty")
    exts = [s.ext for s in stages]
    if any(b > a for a, b in zip(exts, exts[1:])):
        raise ValueError("stage ext must be non-increasing")
    opts = opts or SolveOptions()
    design = init
    flags = list(init.radius_frozen)
    trace, reports = [], []
    offset = 0
    for i, st in enumerate(stages):
        if i > 0 and between is not None:
            design = between(i, design)
            flags = list(design.radius_frozen)
        start = _stage_design(design, st)
        obj = Objective(st.objective, target, st.tspec or tspec, st.aspec or aspec,
                        inflate=st.ext, threads=threads)
        sopts = replace(opts, tol=st.tol, max_iter=st.max_iter)
        try:
            res = minimize(obj, start, sopts, cons, eval_offset=offset)
        except SolverError as exc:
            log.warning("stage %d failed: %s", i, exc)
            reports.append(StageReport(i, st.objective, np.nan, np.nan, 0, 0, "error", False))
            design = DesignVector(start.pills, flags) if len(start) == len(flags) else start
            continue
        trace.extend((e, v, i) for e, v in zip(res.eval_trace, res.objective_trace))
        offset += res.eval_count
        ok = res.objective_trace[-1] <= res.objective_trace[0]
        reports.append(StageReport(i, st.objective, res.objective_trace[0], res.objective_trace[-1],
                                   res.eval_count, res.iterations, res.termination.value, ok))
        design = res.design if ok else start
        if len(design) == len(flags):
            design = DesignVector(design.pills, flags)
    design = DesignVector(design.pills, [False] * len(design))
    return StagedResult(design, trace, reports)


# -------------------------------------------------------------- heuristics


def area_uniqueness_ratios(design, tspec: TransitionSpec, grid: GridSpec):
    """Area ratios ``AR`` and uniqueness ratios ``UR`` from per-pill footprints.

    The footprint of pill m is its own pseudo-density (no inflation),
    integrated over the design domain with the grid quadrature.
    """
    Z = design.matrix() if isinstance(design, DesignVector) else np.asarray(design).reshape(-1, 5)
    n = Z.shape[0]
    if n < 1:
        raise ValueError("need at least one pill")
    ev = evaluate_design(Z, tspec, AggregatorSpec("sum"), grid, derivatives=False)
    chi = ev.rho_points
    keep = grid.domain_mask().ravel()
    area = grid.hx * grid.hy
    A = np.asarray(ev.quad.E[keep] @ chi).sum(axis=0) * area
    one_minus = 1.0 - chi
    # exclusive products via prefix/suffix to avoid dividing by (1 - chi)
    pre = np.ones_like(chi)
    suf = np.ones_like(chi)
    for m in range(1, n):
        pre[:, m] = pre[:, m - 1] * one_minus[:, m - 1]
        suf[:, n - 1 - m] = suf[:, n - m] * one_minus[:, n - m]
    U = np.asarray(ev.quad.E[keep] @ (chi * pre * suf)).sum(axis=0) * area
    total = A.sum()
    AR = A / total if total > 0 else np.zeros(n)
    UR = np.where(A > 0, U / np.where(A > 0, A, 1.0), 0.0)
    return AR, np.clip(UR, 0.0, 1.0)


def prune(design: DesignVector, AR, UR, cfg: HeuristicConfig) -> DesignVector:
    """Remove pills with ``AR < ar_min`` or ``UR < ur_min``; order preserved."""
    AR, UR = np.asarray(AR, dtype=float), np.asarray(UR, dtype=float)
    if AR.shape != (len(design),) or UR.shape != (len(design),):
        raise ValueError("AR and UR need one entry per pill")
    keep = (AR >= cfg.ar_min) & (UR >= cfg.ur_min)
    return DesignVector([p for p, k in zip(design.pills, keep) if k],
                        [f for f, k in zip(design.radius_frozen, keep) if k])


def segment_distance(a, b) -> float:
    """Minimal distance between segments ``a`` and ``b`` given as (px, py, qx, qy, ...)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)

    def point_seg(x, p, q):
        u = q - p
        t = np.clip((x - p) @ u / max(u @ u, 1e-300), 0.0, 1.0)
        return float(np.hypot(*(x - p - t * u)))

    p1, q1, p2, q2 = a[0:2], a[2:4], b[0:2], b[2:4]

    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    d1, d2 = orient(p1, q1, p2), orient(p1, q1, q2)
    d3, d4 = orient(p2, q2, p1), orient(p2, q2, q1)
    if d1 * d2 < 0 and d3 * d4 < 0:
        return 0.0
    return min(point_seg(p1, p2, q2), point_seg(q1, p2, q2), point_seg(p2, p1, q1), point_seg(q2, p1, q1))


def merge_groups(design: DesignVector, cfg: HeuristicConfig) -> list[list[int]]:
    """Connected components of the (angle, proximity) adjacency, ordered by first member."""
    Z = design.matrix()
    n = Z.shape[0]
    U = Z[:, 2:4] - Z[:, 0:2]
    theta = np.arctan2(U[:, 1], U[:, 0])
    centers = 0.5 * (Z[:, 0:2] + Z[:, 2:4])
    lim = math.radians(cfg.theta_lim)
    rows, cols = [], []
    for a in range(n):
        for b in range(a + 1, n):
            diff = abs(theta[a] - theta[b]) % math.pi
            diff = min(diff, math.pi - diff)
            if cfg.proximity == "center":
                dist = float(np.hypot(*(centers[a] - centers[b])))
            else:
                dist = segment_distance(Z[a], Z[b])
            if diff <= lim + 1e-12 and dist < cfg.d_min:
                rows.append(a)
                cols.append(b)
    adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    groups: dict = {}
    for m, lab in enumerate(labels):
        groups.setdefault(lab, []).append(m)
    return sorted(groups.values(), key=lambda g: g[0])


def group_merge(design: DesignVector, cfg: HeuristicConfig) -> DesignVector:
    """Replace each group of near-parallel, nearby pills by its longest member.

    The representative keeps its endpoints and takes the smallest radius
    of the group, truncated at zero.
    """
    if len(design) == 0:
        return design
    pills, flags = [], []
    for g in merge_groups(design, cfg):
        best = max(g, key=lambda m: (design.pills[m].length, -m))
        p = design.pills[best]
        r = max(0.0, min(design.pills[m].r for m in g))
        pills.append(PillParams(p.px, p.py, p.qx, p.qy, r))
        flags.append(design.radius_frozen[best])
    return DesignVector(pills, flags)


@dataclass
class HeuristicReport:
    AR: np.ndarray
    UR: np.ndarray
    n_before: int
    n_pruned: int
    n_after: int
    restored: bool = False


def apply_heuristics(design: DesignVector, tspec: TransitionSpec, grid: GridSpec,
                     cfg: HeuristicConfig) -> tuple[DesignVector, HeuristicReport]:
    """Prune by AR/UR, then merge groups.  An empty prune keeps the highest-AR pill."""
    AR, UR = area_uniqueness_ratios(design, tspec, grid)
    pruned = prune(design, AR, UR, cfg)
    restored = False
    if len(pruned) == 0:
        log.warning("pruning removed every pill; keeping the largest one")
        best = int(np.argmax(AR))
        pruned = DesignVector([design.pills[best]], [design.radius_frozen[best]])
        restored = True
    merged = group_merge(pruned, cfg)
    return merged, HeuristicReport(AR, UR, len(design), len(pruned), len(merged), restored)


# -------------------------------------------------------------- refinement


def mean_squared_error(design, target: TargetField, tspec: TransitionSpec,
                       aspec: AggregatorSpec) -> float:
    """Tracking value divided by the number of design-domain elements."""
    grid = target.grid
    if design is None or len(design) == 0:
        cur = np.zeros_like(target.values)
    else:
        cur = project_field(design, tspec, aspec, grid).values
    return float(np.sum((target.values - cur) ** 2) / (grid.nx * grid.ny))


def refinement_seed(mask: np.ndarray, grid: GridSpec, l_min: float, r: float) -> np.ndarray:
    """Short diagonal pill at the centroid of the residual mask."""
    centers = grid.element_centers().reshape(grid.ny, grid.nx, 2)
    c = centers[mask].mean(axis=0)
    h = 0.5 * l_min * np.array([math.sqrt(0.5), math.sqrt(0.5)])
    return np.array([*(c - h), *(c + h), r])


@dataclass
class RefinementResult:
    design: DesignVector | None
    audit: list
    reason: str
    J: float


def refine_loop(target: TargetField, design: DesignVector | None, rcfg: RefinementConfig, *,
                tspec: TransitionSpec, aspec: AggregatorSpec, cons: ConstraintSet,
                stages=None, opts: SolveOptions | None = None, threads: int = 1) -> RefinementResult:
    """Add pills one at a time where the target is uncovered.

    Each candidate is oriented with the reward objective against the
    residual mask (radius fixed), converged with the tracking objective
    against the mask, appended to the current design and converged jointly
    against the true target with the last stage of ``stages``.  It is kept
    when the mean-squared error drops by more than ``eps_abs`` or
    ``eps_rel`` (relative).
    """
    stages = list(stages or default_stages())
    explore = next((s for s in stages if s.objective == "reward"), stages[0])
    final = stages[-1]
    grid = target.grid
    best = design if design is not None and len(design) > 0 else None
    J_best = mean_squared_error(best, target, tspec, aspec)
    audit = []
    reason = "k_max"
    for k in range(rcfg.K_max):
        cur = (np.zeros_like(target.values) if best is None
               else project_field(best, tspec, aspec, grid).values)
        mask = residual_mask(target, ElementField(cur, grid), rcfg.tau_res)
        if not mask.any():
            reason = "empty_mask"
            break
        r0 = rcfg.fixed_r if rcfg.fixed_r is not None else rcfg.r_seed
        seed = refinement_seed(mask, grid, max(cons.l_min, 1e-3), r0)
        mtarget = TargetField(mask.astype(float), grid)
        entry = {"k": k, "mask_elements": int(mask.sum()), "J_before": J_best}
        try:
            frozen_r = rcfg.fixed_r is not None
            ori = run_staged(mtarget, DesignVector.from_array(seed), [
                replace(explore, radius_frozen=True, fixed_radius=r0),
                replace(final, radius_frozen=frozen_r, fixed_radius=rcfg.fixed_r),
            ], tspec=tspec, aspec=aspec, cons=cons, opts=opts, threads=threads).design
            ori = DesignVector(ori.pills, [frozen_r])
            cand = ori if best is None else DesignVector(best.pills, [False] * len(best)).concat(ori)
            full = run_staged(target, cand, [final], tspec=tspec, aspec=aspec, cons=cons,
                              opts=opts, threads=threads).design
        except (SolverError, ValueError) as exc:
            entry.update(accepted=False, error=str(exc))
            audit.append(entry)
            reason = "rejected"
            break
        J_full = mean_squared_error(full, target, tspec, aspec)
        d_abs = J_best - J_full
        d_rel = d_abs / max(J_best, 1e-12)
        accepted = d_abs > rcfg.eps_abs or d_rel > rcfg.eps_rel
        entry.update(J_after=J_full, delta_abs=d_abs, delta_rel=d_rel, accepted=bool(accepted),
                     pill=full.matrix()[-1].tolist())
        audit.append(entry)
        if not accepted:
            reason = "rejected"
            break
        best, J_best = full, J_full
    return RefinementResult(best, audit, reason, J_best)
