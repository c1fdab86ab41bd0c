"""
Finite-difference verification of the analytic derivatives.

Gradients are compared with central differences of the value and Hessians
with central differences of the analytic gradient.  The default step is
small enough that truncation is negligible; with larger steps the
differences can be Richardson extrapolated.  Errors are reported per
coordinate (per entry for Hessians), each scaled by the largest magnitude of
the reference vector (matrix), so isolated near-zero entries do not inflate
the error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregation import AggregatorSpec
from .geometry import PillParams, Point2, distance_jet, unsigned_distances
from .grid import GridSpec, element_average_jet, get_quadrature, quad_points
from .objective import Objective, TargetField, reward_jet, tracking_jet
from .transition import TransitionSpec, pseudo_density_jet

GRAD_TOL = 1e-6
HESS_TOL = 1e-4


@dataclass
class CheckReport:
    """Result of one finite-difference comparison.

    ``grad_errors`` holds one entry per checked coordinate and
    ``hess_errors`` one row per checked coordinate.  ``inactive`` marks a
    point where both the analytic and the finite-difference gradient lie
    below the resolution of the differences, i.e. vanish or are too small
    relative to the value for double-precision differences to certify.
    """

    name: str
    coords: np.ndarray
    grad_errors: np.ndarray
    hess_errors: np.ndarray
    inactive: bool = False

    @property
    def max_grad_error(self) -> float:
        return float(self.grad_errors.max(initial=0.0))

    @property
    def max_hess_error(self) -> float:
        return float(self.hess_errors.max(initial=0.0))

    def passed(self, grad_tol: float = GRAD_TOL, hess_tol: float = HESS_TOL) -> bool:
        return self.inactive or (self.max_grad_error < grad_tol and self.max_hess_error < hess_tol)


def _scaled_errors(analytic, reference, atol):
    scale = max(float(np.max(np.abs(reference), initial=0.0)), atol)
    return np.abs(analytic - reference) / scale


def _central(problem, x0, i, h):
    xp, xm = x0.copy(), x0.copy()
    xp[i] += h
    xm[i] -= h
    jp, jm = problem(xp), problem(xm)
    return (jp.value - jm.value) / (2 * h), (np.asarray(jp.grad) - np.asarray(jm.grad)) / (2 * h)


def gradcheck(problem, x0, step: float = 1e-6, samples: int | None = None, *, rng=None,
              atol: float = 1e-12, name: str = "", stencil=None,
              richardson: bool = False, resolution: float = GRAD_TOL) -> CheckReport:
    """Compare a jet's derivatives with central differences.

    Parameters
    ----------
    problem : callable
        ``problem(x)`` returns an object with ``value``, ``grad`` and
        ``hess`` attributes (any of the jets in this package).
    x0 : array_like
        Evaluation point; must not be singular for ``problem``.
    step : float
        Difference step, scaled by ``max(1, |x_i|)`` per coordinate.
    samples : int, optional
        Check only this many randomly chosen coordinates.
    rng : numpy Generator or int, optional
        Coordinate selection source.
    atol : float
        Floor for the error scale; gradients below it count as zero.
    stencil : callable, optional
        Cheaper stand-in for ``problem`` at the difference points; it only
        needs ``value`` and ``grad``.
    richardson : bool
        Combine steps ``h`` and ``h/2`` to cancel the O(h^2) term.
    resolution : float
        Relative accuracy the comparison must be able to certify.  A
        gradient whose magnitude is below the rounding noise of the value
        differences (``eps |f| / h``) divided by this is reported inactive.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    jet = problem(x0)
    g = np.atleast_1d(np.asarray(jet.grad, dtype=float))
    H = np.atleast_2d(np.asarray(jet.hess, dtype=float))
    n = x0.size
    coords = np.arange(n)
    if samples is not None and samples < n:
        coords = np.sort(np.random.default_rng(rng).choice(n, size=samples, replace=False))
    g_fd = np.empty(coords.size)
    H_fd = np.empty((coords.size, n))
    for k, i in enumerate(coords):
        h = step * max(1.0, abs(x0[i]))
        f = stencil or problem
        g_fd[k], H_fd[k] = _central(f, x0, i, h)
        if richardson:
            g2, H2 = _central(f, x0, i, h / 2)
            g_fd[k] = (4 * g2 - g_fd[k]) / 3
            H_fd[k] = (4 * H2 - H_fd[k]) / 3
    h_min = step * max(1.0, float(np.abs(x0[coords]).min(initial=1.0)))
    noise = 4.0 * np.finfo(float).eps * max(1.0, abs(float(jet.value))) / h_min
    floor = max(atol, noise / resolution)
    inactive = bool(np.all(np.abs(g) <= floor) and np.all(np.abs(g_fd) <= floor))
    if inactive:
        return CheckReport(name, coords, np.zeros(coords.size), np.zeros((coords.size, n)), True)
    return CheckReport(
        name,
        coords,
        _scaled_errors(g[coords], g_fd, atol),
        _scaled_errors(H[coords], H_fd, atol),
    )


# ------------------------------------------------------------ module suite


@dataclass
class ModuleSummary:
    module: str
    checks: int
    inactive: int
    max_grad_error: float
    max_hess_error: float
    failures: int
    reports: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.failures == 0


def random_pill(rng, bounds=(0.0, 0.0, 1.0, 1.0), r=(0.03, 0.2), min_len=0.1) -> np.ndarray:
    """Random pill inside ``bounds = (x0, y0, x1, y1)``."""
    x0, y0, x1, y1 = bounds
    while True:
        P = rng.uniform((x0, y0), (x1, y1))
        Q = rng.uniform((x0, y0), (x1, y1))
        if np.hypot(*(P - Q)) >= min_len:
            return np.array([*P, *Q, rng.uniform(*r)])


def _near_point(rng, z, spread):
    t = rng.uniform(-0.2, 1.2)
    base = z[:2] + t * (z[2:4] - z[:2])
    return base + rng.normal(scale=spread, size=2)


def _band_point(rng, z, lo, hi):
    """Point whose signed distance to the pill lies inside ``(lo, hi)``."""
    P, Q = z[:2], z[2:4]
    u = (Q - P) / np.hypot(*(Q - P))
    nrm = np.array([-u[1], u[0]]) * rng.choice((-1.0, 1.0))
    t = rng.uniform(0.05, 0.95)
    return P + t * (Q - P) + (z[4] + 0.5 * (lo + hi) + rng.uniform(-0.475, 0.475) * (hi - lo)) * nrm


def _summarize(module, reports, grad_tol, hess_tol):
    active = [r for r in reports if not r.inactive]
    return ModuleSummary(
        module,
        len(reports),
        len(reports) - len(active),
        max((r.max_grad_error for r in active), default=0.0),
        max((r.max_hess_error for r in active), default=0.0),
        sum(not r.passed(grad_tol, hess_tol) for r in reports),
        reports,
    )


def check_distance(n_checks, rng, *, signed=False, step=1e-6):
    reports = []
    while len(reports) < n_checks:
        z = random_pill(rng)
        x = _near_point(rng, z, z[4] + 0.1)
        pill = PillParams.from_array(z)
        jet = distance_jet(Point2(*x), pill, signed=signed)
        if jet.singular:
            continue
        reports.append(gradcheck(lambda v: distance_jet(Point2(*x), PillParams.from_array(v), signed=signed),
                                 z, step, name="distance_jet"))
    return reports


def check_density(n_checks, rng, tspec: TransitionSpec, *, step=1e-6):
    reports = []
    while len(reports) < n_checks:
        z = random_pill(rng)
        x = _band_point(rng, z, *tspec.support)
        if pseudo_density_jet(tspec, PillParams.from_array(z), x).singular:
            continue
        reports.append(gradcheck(lambda v: pseudo_density_jet(tspec, PillParams.from_array(v), x),
                                 z, step, name="pseudo_density_jet"))
    return reports


def _design(rng, n, grid: GridSpec):
    x0, y0, x1, y1 = grid.bounds
    pad = 0.1 * min(x1 - x0, y1 - y0)
    b = (x0 + pad, y0 + pad, x1 - pad, y1 - pad)
    span = min(x1 - x0, y1 - y0)
    return np.concatenate([random_pill(rng, b, (0.05 * span, 0.15 * span), 0.2 * span) for _ in range(n)])


def near_branch_ray(points, Z, tspec: TransitionSpec, margin: float) -> bool:
    """Whether a point in some pill's band lies within ``margin`` of a cap ray.

    Across the rays through P and Q normal to the segment the distance is
    only C^1, so a difference stencil that crosses one does not approximate
    the Hessian.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    lo, hi = tspec.support
    for z in np.asarray(Z, dtype=float).reshape(-1, 5):
        P, Q = z[:2], z[2:4]
        D = float(np.hypot(*(Q - P)))
        d = unsigned_distances(pts, z) - z[4]
        t = (pts[(d > lo - margin) & (d < hi + margin)] - P) @ ((Q - P) / D)
        if np.any(np.abs(t) < margin) or np.any(np.abs(t - D) < margin):
            return True
    return False


def check_element_average(n_checks, rng, tspec, aspec, grid: GridSpec, *, n_pills=2, step=1e-6):
    reports = []
    while len(reports) < n_checks:
        x = _design(rng, n_pills, grid)
        # element under a random pill's transition band
        z = x.reshape(-1, 5)[rng.integers(n_pills)]
        px, py = _near_point(rng, z, 0.0) + z[4] * np.array([0.0, 1.0])
        i = int(np.clip((px - grid.x0) / grid.hx, 0, grid.nx - 1))
        j = int(np.clip((py - grid.y0) / grid.hy, 0, grid.ny - 1))
        e = j * grid.nx + i
        if near_branch_ray(quad_points(grid, e), x, tspec, 10 * step):
            continue
        reports.append(gradcheck(lambda v: element_average_jet(v, tspec, aspec, grid, e),
                                 x, step, name="element_average_jet"))
    return reports


def check_objectives(n_checks, rng, tspec, aspec, grid: GridSpec, *, n_pills=3, step=1e-6):
    target = TargetField(rng.uniform(0.0, 1.0, size=(grid.ny, grid.nx)), grid)
    reports = []
    nodes = get_quadrature(grid).points
    while len(reports) < 2 * n_checks:
        x = _design(rng, n_pills, grid)
        if near_branch_ray(nodes, x, tspec, 10 * step):
            continue
        for kind, f in (("tracking", tracking_jet), ("reward", reward_jet)):
            first = Objective(kind, target, tspec, aspec)
            reports.append(gradcheck(lambda v, f=f: f(v, tspec, aspec, grid, target), x, step,
                                     name=f"{kind}_jet", stencil=lambda v, o=first: o(v, order=1)))
    return reports


def module_report(tspec: TransitionSpec, aspec: AggregatorSpec, grid: GridSpec, *, samples: int = 20,
                  seed: int = 0, grad_tol: float = GRAD_TOL, hess_tol: float = HESS_TOL) -> list[ModuleSummary]:
    """Finite-difference checks of every analytic layer.

    Objective-level checks use ``grid`` as given, so pass a coarse grid
    when runtime matters.
    """
    rng = np.random.default_rng(seed)
    n_obj = max(1, samples // 4)
    rows = [
        ("geometry", check_distance(samples, rng)),
        ("transition", check_density(samples, rng, tspec)),
        ("grid", check_element_average(max(1, samples // 2), rng, tspec, aspec, grid)),
        ("objective", check_objectives(n_obj, rng, tspec, aspec, grid)),
    ]
    return [_summarize(m, r, grad_tol, hess_tol) for m, r in rows]
