"""
Bound- and length-constrained local minimization of pill designs.

The solver is a projected line-search method:

* box bounds (endpoints inside the domain, radius bounds) are handled by
  projection with an active set that freezes coordinates sitting on a bound
  whose gradient points outward;
* the lower segment-length bound is handled either the same way
  (``length_mode="projection"``: short segments are stretched back to
  ``l_min`` and Newton steps are taken in the tangent space of the active
  bounds) or through a C^2 truncated log barrier
  (``length_mode="barrier"``) whose weight shrinks by 0.2 per outer loop;
  an upper length bound always uses the barrier;
* steps come either from the exact Hessian (Cholesky with a diagonal shift
  doubled until the factorization succeeds, raised further whenever a step
  is rejected) or from an L-BFGS two-loop recursion with halving
  backtracking.  Acceptance is Armijo along the projected path.

Every trial point is one objective evaluation; ``eval_count`` counts them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space

from .geometry import GeometryError
from .grid import DesignVector
from .objective import ConstraintSet, ObjectiveJet

C1 = 1e-4
LENGTH_MODES = ("projection", "barrier")


class Termination(enum.Enum):
    TOLERANCE = "tolerance"
    MAX_ITER = "max_iter"
    LINE_SEARCH_FAILURE = "line_search_failure"


class SolverError(RuntimeError):
    """Non-finite objective or gradient at an accepted iterate."""


@dataclass
class SolveOptions:
    """Solver settings.

    Parameters
    ----------
    tol : float
        Stop when the projected gradient (inf-norm, relative to
        ``max(1, |f|)``) or the decrease of the last accepted step falls
        below ``tol``.
    decrease_scale : {"progress", "objective"}
        Scale of the decrease test.  ``"objective"`` uses ``max(1, |f|)``;
        ``"progress"`` uses ``max(1, min(|f|, f0 - f))`` with ``f0`` the
        value at the start of the solve, so a large constant offset in the
        objective (typical of the reward functional) cannot end a solve
        that has barely moved.
    max_iter : int
        Accepted iterations allowed.
    hessian_mode : {"exact", "lbfgs"}
    lbfgs_history : int
    length_mode : {"projection", "barrier"}
        Treatment of the lower segment-length bound.
    barrier_mu0 : float
        Initial barrier weight relative to ``max(1, |f(x0)|)``.
    barrier_mu_min : float
        Relative weight below which the barrier is no longer reduced
        (never below ``tol``).
    ls_max_backtracks : int
    max_step : float
        Largest coordinate change per step (inf-norm), in domain units.
    rng_seed : int
        Unused by the deterministic solver; kept so runs record their seed.
    """

    tol: float = 1e-7
    max_iter: int = 100
    hessian_mode: str = "exact"
    lbfgs_history: int = 3
    length_mode: str = "projection"
    decrease_scale: str = "progress"
    barrier_mu0: float = 1e-3
    barrier_mu_min: float = 1e-12
    ls_max_backtracks: int = 30
    max_step: float = 0.25
    rng_seed: int = 0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be >= 1")
        if self.hessian_mode not in ("exact", "lbfgs"):
            raise ValueError("hessian_mode must be 'exact' or 'lbfgs'")
        if int(self.lbfgs_history) < 1:
            raise ValueError("lbfgs_history must be >= 1")
        if self.length_mode not in LENGTH_MODES:
            raise ValueError(f"length_mode must be one of {LENGTH_MODES}")
        if self.decrease_scale not in ("progress", "objective"):
            raise ValueError("decrease_scale must be 'progress' or 'objective'")
        if not self.max_step > 0:
            raise ValueError("max_step must be positive")


@dataclass
class SolveResult:
    design: DesignVector
    x: np.ndarray
    objective_trace: list
    eval_trace: list
    eval_count: int
    termination: Termination
    feasible: bool
    iterations: int = 0
    objective: float = float("nan")
    history: list = field(default_factory=list)


def _barrier(s, c):
    """Truncated log barrier B(s) >= 0, C^2 at s = c, zero for s >= c."""
    t = s / c
    inside = t < 1.0
    ts = np.where(inside, t, 1.0)
    ss = np.where(inside, s, c)
    B = np.where(inside, -np.log(ts) + 2.0 * ts - 0.5 * ts * ts - 1.5, 0.0)
    B1 = np.where(inside, -1.0 / ss + 2.0 / c - ss / (c * c), 0.0)
    B2 = np.where(inside, 1.0 / (ss * ss) - 1.0 / (c * c), 0.0)
    return B, B1, B2


# Hessian of |Q - P|^2 w.r.t. (px, py, qx, qy)
_LEN_H = 2.0 * np.array([[1, 0, -1, 0], [0, 1, 0, -1], [-1, 0, 1, 0], [0, -1, 0, 1]], dtype=float)


def length_slacks(x, cons: ConstraintSet, lower: bool = True):
    """Slacks ``s >= 0`` of the length constraints with barrier thresholds.

    Returns ``(L2, U, items)`` where ``items`` holds ``(s, c, sign)`` tuples,
    ``sign = +1`` for the lower bound (``s = L^2 - l_min^2``) and ``-1`` for
    the upper bound.
    """
    Z = np.asarray(x, dtype=float).reshape(-1, 5)
    U = Z[:, 2:4] - Z[:, 0:2]
    L2 = (U * U).sum(axis=1)
    out = []
    if lower and cons.l_min > 0:
        out.append((L2 - cons.l_min**2, cons.l_min**2, 1.0))
    if cons.l_max is not None:
        out.append((cons.l_max**2 - L2, max(cons.l_min, 0.1 * cons.l_max) ** 2, -1.0))
    return L2, U, out


def project_feasible(x, cons: ConstraintSet, frozen=None, margin: float = 1e-6,
                     lo=None, hi=None) -> np.ndarray:
    """Clip to the box and restore segment lengths to ``[l_min, l_max]``.

    Out-of-range segments are rescaled symmetrically about their center
    along their current direction (x-axis if degenerate) and shifted inward
    if the result would leave the box.
    """
    Z = np.asarray(x, dtype=float).reshape(-1, 5).copy()
    if lo is None or hi is None:
        lo, hi = cons.bounds(Z.shape[0])
    lo, hi = np.asarray(lo).reshape(-1, 5), np.asarray(hi).reshape(-1, 5)
    frozen = np.zeros(Z.shape, dtype=bool) if frozen is None else np.asarray(frozen).reshape(-1, 5)
    Z = np.where(frozen, Z, np.clip(Z, lo, hi))
    xmin, ymin, xmax, ymax = cons.box
    short = cons.l_min * (1.0 + margin) if cons.l_min > 0 else 0.0
    for z in Z:
        u = z[2:4] - z[0:2]
        L = float(np.hypot(*u))
        if L > 0 and L >= short and (cons.l_max is None or L <= cons.l_max):
            continue
        if L < short or L == 0.0:
            newL = max(short, 1e-9 * max(xmax - xmin, ymax - ymin))
        else:
            newL = cons.l_max * (1.0 - margin)
        d = u / L if L > 0 else np.array([1.0, 0.0])
        h = 0.5 * newL * d
        c = 0.5 * (z[0:2] + z[2:4])
        c[0] = np.clip(c[0], xmin + abs(h[0]), xmax - abs(h[0]))
        c[1] = np.clip(c[1], ymin + abs(h[1]), ymax - abs(h[1]))
        z[0:2], z[2:4] = c - h, c + h
    return Z.ravel()


def is_feasible(x, cons: ConstraintSet, tol: float = 1e-8) -> bool:
    Z = np.asarray(x, dtype=float).reshape(-1, 5)
    lo, hi = cons.bounds(Z.shape[0])
    xv = Z.ravel()
    if np.any(xv < lo - tol) or np.any(xv > hi + tol):
        return False
    L = np.sqrt(((Z[:, 2:4] - Z[:, 0:2]) ** 2).sum(axis=1))
    if np.any(L < cons.l_min * (1.0 - tol)):
        return False
    if cons.l_max is not None and np.any(L > cons.l_max * (1.0 + tol)):
        return False
    return True


class _Merit:
    """Objective plus barrier terms; infeasible or degenerate points give ``None``."""

    def __init__(self, problem, cons: ConstraintSet, order: int, barrier_lower: bool = True):
        self.problem = problem
        self.cons = cons
        self.order = order
        self.barrier_lower = barrier_lower
        self.mu = 0.0
        self.count = 0
        self._last = None

    def slacks(self, x):
        return length_slacks(x, self.cons, lower=self.barrier_lower)

    def barrier_active(self, x) -> bool:
        _, _, cl = self.slacks(x)
        return any(np.any(s < c) for s, c, _ in cl)

    def __call__(self, x):
        self.count += 1
        _, U, cl = self.slacks(x)
        if any(np.any(s <= 0.0) for s, _, _ in cl):
            return None
        try:
            jet: ObjectiveJet = self.problem(x, self.order)
        except GeometryError:
            return None
        if not np.isfinite(jet.value):
            return None
        self._last = jet
        return self._combine(jet, U, cl)

    def rescale(self, x):
        """Re-assemble the merit at the last evaluated point after a change of ``mu``."""
        _, U, cl = self.slacks(x)
        return self._combine(self._last, U, cl)

    def _combine(self, jet, U, cl):
        f = jet.value
        val = f
        g = None if jet.grad is None else jet.grad.copy()
        H = None if jet.hess is None else jet.hess.copy()
        if self.mu > 0.0:
            for s, c, sign in cl:
                B, B1, B2 = _barrier(s, c)
                val += self.mu * B.sum()
                if g is None:
                    continue
                for a in np.nonzero(B1)[0]:
                    ds = sign * 2.0 * np.concatenate([-U[a], U[a]])
                    sl = slice(5 * a, 5 * a + 4)
                    g[sl] += self.mu * B1[a] * ds
                    if H is not None:
                        H[sl, sl] += self.mu * (B2[a] * np.outer(ds, ds) + B1[a] * sign * _LEN_H)
        return f, val, g, H


def pd_shift(H) -> float:
    """Smallest shift ``lam`` in {0, 1e-8, 2e-8, ...} making ``H + lam I`` factorable.

    When a shift is needed it is doubled once more, so the smallest
    eigenvalue of the shifted matrix is at least ``lam / 2`` rather than
    arbitrarily close to zero.
    """
    lam = 0.0
    I = np.eye(H.shape[0])
    while True:
        try:
            np.linalg.cholesky(H + lam * I)
            break
        except np.linalg.LinAlgError:
            lam = 1e-8 if lam == 0.0 else 2.0 * lam
            if not np.isfinite(lam) or lam > 1e300:
                raise SolverError("Hessian could not be made positive definite")
    return 2.0 * lam


def shifted_solve(H, g, lam: float) -> np.ndarray:
    L = np.linalg.cholesky(H + lam * np.eye(H.shape[0]))
    return np.linalg.solve(L.T, np.linalg.solve(L, g))


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    s, y = S[-1], Y[-1]
    q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * (y @ q)
        q += s * (a - b)
    return q


def _active_lengths(x, g, l_act):
    """Pills whose lower length bound is active, with constraint normals and multipliers."""
    Z = x.reshape(-1, 5)
    U = Z[:, 2:4] - Z[:, 0:2]
    L = np.hypot(U[:, 0], U[:, 1])
    out = []
    for a in np.nonzero(L <= l_act)[0]:
        nvec = np.zeros_like(x)
        nvec[5 * a : 5 * a + 4] = 2.0 * np.concatenate([-U[a], U[a]])
        gn = g @ nvec
        if gn > 0:
            out.append((a, nvec, gn / (nvec @ nvec)))
    return out


def length_step_limit(x, d, l_min: float, l_act: float) -> float:
    """Largest ``t <= 1`` keeping every segment off ``l_min`` along ``x + s d, s <= t``.

    Only segments strictly longer than ``l_act`` are checked; the others sit
    on the bound and are handled by the active set.  A straight step that
    would swap endpoints through a degenerate segment is cut where it first
    reaches the bound.
    """
    Z, D = x.reshape(-1, 5), d.reshape(-1, 5)
    u = Z[:, 2:4] - Z[:, 0:2]
    du = D[:, 2:4] - D[:, 0:2]
    a = (du * du).sum(axis=1)
    b = 2.0 * (u * du).sum(axis=1)
    c = (u * u).sum(axis=1) - l_min**2
    t = 1.0
    for ai, bi, ci, Lsq in zip(a, b, c, (u * u).sum(axis=1)):
        if Lsq <= l_act**2 or ai <= 0.0:
            continue
        disc = bi * bi - 4.0 * ai * ci
        if disc < 0.0:
            continue
        root = (-bi - np.sqrt(disc)) / (2.0 * ai)
        if 0.0 < root < t:
            t = root
    return t


def minimize(problem, x0, opts: SolveOptions, cons: ConstraintSet, radius_frozen=None,
             eval_offset: int = 0) -> SolveResult:
    """Minimize ``problem`` from ``x0`` under ``cons``.

    Parameters
    ----------
    problem : callable
        ``problem(x, order) -> ObjectiveJet`` with ``order`` in {0, 1, 2}.
    x0 : array_like or DesignVector
    radius_frozen : sequence of bool, optional
        Per-pill flags; frozen radii are excluded from the free variables.
    eval_offset : int
        Added to recorded evaluation indices (for multi-stage traces).
    """
    if isinstance(x0, DesignVector):
        radius_frozen = x0.radius_frozen if radius_frozen is None else radius_frozen
        x0 = x0.as_array()
    x = np.asarray(x0, dtype=float).copy()
    n = x.size // 5
    rf = np.zeros(n, dtype=bool) if radius_frozen is None else np.asarray(radius_frozen, dtype=bool)
    frozen = np.zeros((n, 5), dtype=bool)
    frozen[:, 4] = rf
    frozen = frozen.ravel()
    free = ~frozen
    x = project_feasible(x, cons, frozen)
    lo, hi = cons.bounds(n)
    lo = np.where(frozen, x, lo)
    hi = np.where(frozen, x, hi)
    proj_len = opts.length_mode == "projection" and cons.l_min > 0
    l_act = cons.l_min * (1.0 + 1e-6)

    def project(v):
        if proj_len:
            return project_feasible(v, cons, frozen, margin=1e-9, lo=lo, hi=hi)
        return np.clip(v, lo, hi)

    exact = opts.hessian_mode == "exact"
    merit = _Merit(problem, cons, 2 if exact else 1, barrier_lower=not proj_len)
    cur = merit(x)
    if cur is None:
        raise SolverError("objective is not finite at the initial design")
    fscale = max(1.0, abs(cur[0]))
    # the truncated barrier vanishes away from the bounds, so it is always on
    merit.mu = opts.barrier_mu0 * fscale
    cur = merit.rescale(x)
    mu_min = max(opts.barrier_mu_min, opts.tol) * fscale
    f, phi, g, H = cur
    trace = [phi]
    etrace = [eval_offset + merit.count]
    S, Y = [], []
    lam_mem = 0.0
    termination = Termination.MAX_ITER
    it = 0

    def capped(d):
        big = np.abs(d).max(initial=0.0)
        return d * (opts.max_step / big) if big > opts.max_step else d

    while it < opts.max_iter:
        if not np.all(np.isfinite(g)):
            raise SolverError("non-finite gradient at accepted iterate")
        gf = np.where(free, g, 0.0)
        inact = free & ~((x <= lo) & (gf > 0)) & ~((x >= hi) & (gf < 0))
        idx = np.nonzero(inact)[0]
        act = _active_lengths(x, gf, l_act) if proj_len else []
        T = null_space(np.array([nv[idx] for _, nv, _ in act])) if act and idx.size else None
        gi = gf[idx]
        gr = gi if T is None else T.T @ gi
        pg_norm = np.abs(gr if T is None else T @ gr).max(initial=0.0)
        converged = pg_norm < opts.tol * max(1.0, abs(phi))
        # a barrier subproblem only needs accuracy proportional to mu
        barrier_done = merit.mu > mu_min and pg_norm <= 10.0 * merit.mu and merit.barrier_active(x)
        converged = converged or barrier_done

        def lift(dr):
            d = np.zeros_like(x)
            d[idx] = dr if T is None else T @ dr
            return d

        def try_point(d):
            if proj_len:
                d = d * length_step_limit(x, d, cons.l_min, l_act)
            xt = project(x + d)
            dx = xt - x
            if not np.any(dx):
                return None
            trial = merit(xt)
            if trial is not None and trial[1] <= phi + C1 * (gf @ dx):
                return xt, trial
            return None

        if not converged:
            step = None
            budget = opts.ls_max_backtracks
            if exact and gr.size:
                # Lagrangian curvature of active length bounds, then damped Newton
                HL = H.copy()
                for a, _, nu in act:
                    HL[5 * a : 5 * a + 4, 5 * a : 5 * a + 4] -= nu * _LEN_H
                Hr = HL[np.ix_(idx, idx)]
                if T is not None:
                    Hr = T.T @ Hr @ T
                Hr = 0.5 * (Hr + Hr.T)
                lam = max(pd_shift(Hr), lam_mem)
                lam_floor = 1e-6 * max(np.abs(np.diag(Hr)).mean(), 1e-12)
                while budget > 0 and step is None:
                    d = lift(-shifted_solve(Hr, gr, lam))
                    if not gf @ d < 0:
                        break
                    budget -= 1
                    step = try_point(capped(d))
                    if step is None:
                        lam = max(4.0 * lam, lam_floor)
                lam_mem = 0.25 * lam if step is not None else 0.0
            elif gr.size:
                dr = -gr
                if S:
                    Si = [v[idx] for v in S]
                    Yi = [v[idx] for v in Y]
                    if T is not None:
                        Si = [T.T @ v for v in Si]
                        Yi = [T.T @ v for v in Yi]
                    if all(s @ y > 0 for s, y in zip(Si, Yi)):
                        dr = -_two_loop(gr, Si, Yi)
                d = lift(dr)
                if not gf @ d < 0:
                    d = lift(-gr)
                d = capped(d)
                while budget > 0 and step is None:
                    budget -= 1
                    step = try_point(d)
                    d = 0.5 * d
            if step is None and gr.size:
                # projected steepest descent as the last resort
                d = lift(-gr)
                d = d / max(np.abs(d).max(), 1e-300) * opts.max_step
                for _ in range(opts.ls_max_backtracks):
                    step = try_point(d)
                    if step is not None:
                        break
                    d = 0.5 * d
            if step is None:
                termination = Termination.LINE_SEARCH_FAILURE
                break
            xt, trial = step
            it += 1
            if not exact:
                sv = xt - x
                yv = np.where(free, trial[2], 0.0) - gf
                if sv @ yv > 1e-10 * np.linalg.norm(sv) * np.linalg.norm(yv):
                    S.append(sv)
                    Y.append(yv)
                    if len(S) > opts.lbfgs_history:
                        S.pop(0)
                        Y.pop(0)
            decrease = phi - trial[1]
            x = xt
            f, phi, g, H = trial
            trace.append(phi)
            etrace.append(eval_offset + merit.count)
            if opts.decrease_scale == "progress":
                converged = decrease < opts.tol * max(1.0, min(abs(phi), trace[0] - phi))
            else:
                converged = decrease < opts.tol * max(1.0, abs(phi))
        if converged:
            if merit.mu > mu_min and merit.barrier_active(x):
                merit.mu *= 0.2
                f, phi, g, H = merit.rescale(x)
                trace[-1] = min(trace[-1], phi)
                continue
            termination = Termination.TOLERANCE
            break
    return SolveResult(
        design=DesignVector.from_array(x, list(rf)),
        x=x,
        objective_trace=trace,
        eval_trace=etrace,
        eval_count=merit.count,
        termination=termination,
        feasible=is_feasible(x, cons),
        iterations=it,
        objective=f,
    )
