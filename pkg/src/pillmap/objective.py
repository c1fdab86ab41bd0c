"""
Tracking and reward functionals over the design vector.

Both objectives are sums of per-element terms ``f(rho_bar_e)``:

* tracking: ``(rho*_e - rho_bar_e)**2``
* reward: ``-rho*_e * rho_bar_e``

so their derivatives share one assembly: with ``f'`` and ``f''`` per
element, the gradient is ``J^T f'`` and the Hessian is
``J^T diag(f'') J`` (Gauss-Newton part, zero for reward) plus the
second-order sensitivities of the element averages weighted by ``f'``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregation import AggregatorSpec
from .grid import DesignVector, ElementField, GridSpec, evaluate_design
from .transition import TransitionSpec

OBJECTIVES = ("tracking", "reward")


@dataclass
class TargetField:
    values: np.ndarray  # (ny, nx), row 0 bottom
    grid: GridSpec

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.ny, self.grid.nx):
            raise ValueError(f"target shape {v.shape} does not match grid {(self.grid.ny, self.grid.nx)}")
        if not np.all(np.isfinite(v)):
            raise ValueError("target contains non-finite values")
        self.values = np.clip(v, 0.0, 1.0)


@dataclass(frozen=True)
class ConstraintSet:
    """Box on endpoints, radius bounds and segment length bounds.

    ``l_min = 0`` disables the lower length bound; degenerate segments are
    then only excluded by the geometry itself.
    """

    box: tuple  # (xmin, ymin, xmax, ymax)
    r_min: float = 0.05
    r_max: float | None = None
    l_min: float = 0.05
    l_max: float | None = None

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.box
        if not (xmax > xmin and ymax > ymin):
            raise ValueError("constraint box must have positive extent")
        if self.r_min < 0:
            raise ValueError("r_min must be non-negative")
        if self.r_max is not None and self.r_max < self.r_min:
            raise ValueError("r_max must be >= r_min")
        if not self.l_min >= 0:
            raise ValueError("l_min must be non-negative (0 disables the lower length bound)")
        if self.l_max is not None and self.l_max < self.l_min:
            raise ValueError("l_max must be >= l_min")

    @classmethod
    def for_grid(cls, grid: GridSpec, **kw) -> "ConstraintSet":
        return cls(box=grid.bounds, **kw)

    def bounds(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Lower/upper bound vectors of length 5n."""
        xmin, ymin, xmax, ymax = self.box
        rmax = np.inf if self.r_max is None else self.r_max
        lo = np.tile([xmin, ymin, xmin, ymin, self.r_min], n).astype(float)
        hi = np.tile([xmax, ymax, xmax, ymax, rmax], n).astype(float)
        return lo, hi


@dataclass
class ObjectiveJet:
    value: float
    grad: np.ndarray | None = None
    hess: np.ndarray | None = None
    gauss_newton: np.ndarray | None = None


def _element_terms(kind: str, target: np.ndarray, rho_bar: np.ndarray, w: np.ndarray):
    if kind == "tracking":
        res = target - rho_bar
        return float(np.sum(w * res * res)), -2.0 * w * res, 2.0 * w
    return float(-np.sum(w * target * rho_bar)), -w * target, None


class Objective:
    """A tracking or reward objective bound to a grid, target and specs.

    Parameters
    ----------
    kind : {"tracking", "reward"}
    target : TargetField
    tspec, aspec : transition and aggregation specs
    inflate : float
        Radius inflation applied inside every distance evaluation.
    mask : ndarray of bool, optional
        (ny, nx) element selection; unselected elements are ignored.
    threads : int
        Worker count for per-pill evaluation.
    """

    def __init__(self, kind: str, target: TargetField, tspec: TransitionSpec,
                 aspec: AggregatorSpec, *, inflate: float = 0.0, mask=None, threads: int = 1):
        if kind not in OBJECTIVES:
            raise ValueError(f"unknown objective {kind!r}; expected one of {OBJECTIVES}")
        self.kind = kind
        self.grid = target.grid
        self.target = target
        self.tspec = tspec
        self.aspec = aspec
        self.inflate = float(inflate)
        self.threads = int(threads)
        self._target_eval = self.grid.embed(target.values).ravel()
        if mask is None:
            self._w = np.ones_like(self._target_eval)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (self.grid.ny, self.grid.nx):
                raise ValueError("mask shape does not match grid")
            self._w = self.grid.embed(mask.astype(float)).ravel()
        self.n_evals = 0

    def __call__(self, x, order: int = 2) -> ObjectiveJet:
        """Evaluate at flat design ``x``; ``order`` selects 0, 1 or 2 derivatives."""
        self.n_evals += 1
        Z = np.asarray(x, dtype=float).reshape(-1, 5)
        ev = evaluate_design(Z, self.tspec, self.aspec, self.grid, inflate=self.inflate,
                             derivatives=order > 0, threads=self.threads)
        val, f1, f2 = _element_terms(self.kind, self._target_eval, ev.rho_bar, self._w)
        if order == 0:
            return ObjectiveJet(val)
        J = ev.jacobian()
        grad = J.T @ f1
        if order == 1:
            return ObjectiveJet(val, grad)
        omega = ev.quad.E.T @ f1
        H = ev.weighted_hessian(omega)
        GN = None
        if f2 is not None:
            GN = (J * f2[:, None]).T @ J
            H = H + GN
        return ObjectiveJet(val, grad, 0.5 * (H + H.T), GN)

    def field(self, x) -> np.ndarray:
        Z = np.asarray(x, dtype=float).reshape(-1, 5)
        return evaluate_design(Z, self.tspec, self.aspec, self.grid, inflate=self.inflate,
                               derivatives=False).field()


def _design_array(design) -> np.ndarray:
    return design.as_array() if isinstance(design, DesignVector) else np.asarray(design, dtype=float).ravel()


def tracking_jet(design, tspec, aspec, grid, target: TargetField) -> ObjectiveJet:
    if target.grid != grid:
        raise ValueError("target grid does not match evaluation grid")
    return Objective("tracking", target, tspec, aspec)(_design_array(design))


def reward_jet(design, tspec, aspec, grid, target: TargetField) -> ObjectiveJet:
    if target.grid != grid:
        raise ValueError("target grid does not match evaluation grid")
    return Objective("reward", target, tspec, aspec)(_design_array(design))


@dataclass
class LengthConstraint:
    g: np.ndarray  # residuals, <= 0 when satisfied
    grad: np.ndarray  # (k, 5)
    hess: np.ndarray  # (k, 5, 5)


def length_constraint_jet(pill, l_min: float, l_max: float | None = None) -> LengthConstraint:
    """Squared-length residuals ``l_min^2 - |Q-P|^2`` (and ``|Q-P|^2 - l_max^2``)."""
    z = pill.as_array() if hasattr(pill, "as_array") else np.asarray(pill, dtype=float)
    ux, uy = z[2] - z[0], z[3] - z[1]
    L2 = ux * ux + uy * uy
    dL2 = np.array([-2 * ux, -2 * uy, 2 * ux, 2 * uy, 0.0])
    H = np.zeros((5, 5))
    H[:4, :4] = 2.0 * np.array([[1, 0, -1, 0], [0, 1, 0, -1], [-1, 0, 1, 0], [0, -1, 0, 1]])
    gs, gr, hs = [l_min**2 - L2], [-dL2], [-H]
    if l_max is not None:
        gs.append(L2 - l_max**2)
        gr.append(dL2)
        hs.append(H)
    return LengthConstraint(np.array(gs), np.array(gr), np.array(hs))


def residual_field(target: TargetField, current: ElementField) -> ElementField:
    """Signed residual ``rho* - rho_bar`` (positive where target is uncovered)."""
    return ElementField(target.values - current.values, current.grid)


def residual_mask(target: TargetField, current: ElementField, tau_res: float) -> np.ndarray:
    """Boolean (ny, nx) mask of elements whose deficit strictly exceeds ``tau_res``."""
    return (target.values - current.values) > tau_res


def normalized_error(value: float, grid: GridSpec) -> float:
    """Objective divided by the element count of the design domain."""
    return value / (grid.nx * grid.ny)
