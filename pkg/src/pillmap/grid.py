"""
Cartesian analysis grid, element quadrature and element-averaged densities.

Elements are indexed row-major with row 0 at the bottom (``e = j * nx + i``).
For quadrature order ``q >= 2`` the nodes sit at fractions ``i / (q - 1)``
of each element edge, so neighbouring elements share nodes.  The grid
evaluates every pill once on the shared node lattice and forms element
means with a sparse averaging matrix ``E`` (rows sum to one).

Padding (``pad > 0``) appends whole rings of elements around the design
domain; those elements carry zero target density.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .aggregation import AggregatorSpec, AggJets, aggregate_jets, aggregate_values
from .geometry import PillParams
from .transition import TransitionSpec, density_band

NUDGE = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Uniform mesh on ``[x0, x0 + Lx] x [y0, y0 + Ly]``.

    Parameters
    ----------
    nx, ny : int
        Element counts of the design domain.
    pad : float
        Width of the evaluation margin; rounded up to whole elements.
    quad_order : int
        Nodes per axis and element, ``1 <= q <= 8``.
    """

    nx: int
    ny: int
    x0: float = 0.0
    y0: float = 0.0
    Lx: float = 1.0
    Ly: float = 1.0
    pad: float = 0.0
    quad_order: int = 3

    def __post_init__(self):
        if int(self.nx) < 1 or int(self.ny) < 1:
            raise ValueError("grid needs at least one element per axis")
        if not (self.Lx > 0 and self.Ly > 0):
            raise ValueError("domain extents must be positive")
        if self.pad < 0:
            raise ValueError("pad must be non-negative")
        if not 1 <= int(self.quad_order) <= 8:
            raise ValueError("quadrature order must lie in [1, 8]")

    @property
    def hx(self) -> float:
        return self.Lx / self.nx

    @property
    def hy(self) -> float:
        return self.Ly / self.ny

    @property
    def pad_x(self) -> int:
        return int(math.ceil(self.pad / self.hx - 1e-12)) if self.pad > 0 else 0

    @property
    def pad_y(self) -> int:
        return int(math.ceil(self.pad / self.hy - 1e-12)) if self.pad > 0 else 0

    @property
    def eval_shape(self) -> tuple[int, int]:
        """``(ny, nx)`` of the padded evaluation mesh."""
        return self.ny + 2 * self.pad_y, self.nx + 2 * self.pad_x

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return self.x0, self.y0, self.x0 + self.Lx, self.y0 + self.Ly

    def with_(self, **kw) -> "GridSpec":
        d = dict(self.__dict__)
        d.update(kw)
        return GridSpec(**d)

    def domain_mask(self) -> np.ndarray:
        """Boolean (NY, NX) mask of evaluation elements inside the design domain."""
        NY, NX = self.eval_shape
        m = np.zeros((NY, NX), dtype=bool)
        m[self.pad_y : self.pad_y + self.ny, self.pad_x : self.pad_x + self.nx] = True
        return m

    def embed(self, field_: np.ndarray) -> np.ndarray:
        """Zero-pad a (ny, nx) field to the evaluation mesh."""
        out = np.zeros(self.eval_shape)
        out[self.domain_mask()] = np.asarray(field_, dtype=float).ravel()
        return out

    def crop(self, field_: np.ndarray) -> np.ndarray:
        """Restrict an evaluation-mesh field to the design domain."""
        f = np.asarray(field_).reshape(self.eval_shape)
        return f[self.pad_y : self.pad_y + self.ny, self.pad_x : self.pad_x + self.nx]

    def element_centers(self) -> np.ndarray:
        """Centers of the design-domain elements, shape (ny, nx, 2)."""
        xs = self.x0 + (np.arange(self.nx) + 0.5) * self.hx
        ys = self.y0 + (np.arange(self.ny) + 0.5) * self.hy
        X, Y = np.meshgrid(xs, ys)
        return np.stack([X, Y], axis=-1)


def quad_rule(q: int) -> tuple[np.ndarray, np.ndarray]:
    """Reference nodes on [0, 1] and equal weights for order ``q``."""
    if not 1 <= q <= 8:
        raise ValueError("quadrature order must lie in [1, 8]")
    if q == 1:
        return np.array([0.5]), np.array([1.0])
    return np.arange(q) / (q - 1.0), np.full(q, 1.0 / q)


def quad_points(grid: GridSpec, e: int, q: int | None = None) -> np.ndarray:
    """Quadrature nodes of design-domain element ``e`` (row-major, row 0 bottom)."""
    q = grid.quad_order if q is None else q
    if not 0 <= e < grid.n_elements:
        raise IndexError(f"element index {e} out of range")
    j, i = divmod(e, grid.nx)
    s, _ = quad_rule(q)
    xs = grid.x0 + (i + s) * grid.hx
    ys = grid.y0 + (j + s) * grid.hy
    X, Y = np.meshgrid(xs, ys)
    return np.column_stack([X.ravel(), Y.ravel()])


@dataclass
class Quadrature:
    """Node lattice of the evaluation mesh and its element-averaging matrix."""

    points: np.ndarray  # (Mp, 2)
    E: sp.csr_matrix  # (Ne_eval, Mp), weights 1/q^2
    grid: GridSpec
    S: sp.csr_matrix  # same pattern, unit weights

    def average(self, values) -> np.ndarray:
        """Element means of node values.

        Sums with unit weights and divides once, so a constant is reproduced
        exactly (summing ``q^2`` copies of ``c / q^2`` is not).
        """
        q = self.grid.quad_order
        return (self.S @ values) / (q * q)

    @classmethod
    def build(cls, grid: GridSpec) -> "Quadrature":
        q = grid.quad_order
        NY, NX = grid.eval_shape
        # integer offsets from the domain origin keep domain nodes bitwise
        # independent of the padding
        if q == 1:
            xs = grid.x0 + (np.arange(NX) - grid.pad_x + 0.5) * grid.hx
            ys = grid.y0 + (np.arange(NY) - grid.pad_y + 0.5) * grid.hy
            X, Y = np.meshgrid(xs, ys)
            pts = np.column_stack([X.ravel(), Y.ravel()])
            eye = sp.identity(NX * NY, format="csr")
            return cls(pts, eye, grid, eye)
        s = q - 1
        mx, my = NX * s + 1, NY * s + 1
        xs = grid.x0 + (np.arange(mx) - grid.pad_x * s) * (grid.hx / s)
        ys = grid.y0 + (np.arange(my) - grid.pad_y * s) * (grid.hy / s)
        X, Y = np.meshgrid(xs, ys)
        pts = np.column_stack([X.ravel(), Y.ravel()])
        jj, ii = np.meshgrid(np.arange(NY), np.arange(NX), indexing="ij")
        e = (jj * NX + ii).ravel()
        bi, bj = np.meshgrid(np.arange(q), np.arange(q))
        rows = np.repeat(e, q * q)
        cols = (
            ((jj.ravel() * s)[:, None] + bj.ravel()[None, :]) * mx
            + (ii.ravel() * s)[:, None]
            + bi.ravel()[None, :]
        ).ravel()
        S = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(NX * NY, mx * my))
        return cls(pts, S / (q * q), grid, S)


_QUAD_CACHE: dict = {}


def get_quadrature(grid: GridSpec) -> Quadrature:
    if grid not in _QUAD_CACHE:
        if len(_QUAD_CACHE) > 16:
            _QUAD_CACHE.clear()
        _QUAD_CACHE[grid] = Quadrature.build(grid)
    return _QUAD_CACHE[grid]


@dataclass
class DesignVector:
    """Ordered pills plus per-pill frozen-radius flags."""

    pills: list
    radius_frozen: list = field(default_factory=list)

    def __post_init__(self):
        self.pills = [p if isinstance(p, PillParams) else PillParams.from_array(p) for p in self.pills]
        if not self.radius_frozen:
            self.radius_frozen = [False] * len(self.pills)
        if len(self.radius_frozen) != len(self.pills):
            raise ValueError("radius_frozen must have one flag per pill")
        self.radius_frozen = [bool(f) for f in self.radius_frozen]

    def __len__(self) -> int:
        return len(self.pills)

    @classmethod
    def from_array(cls, x, radius_frozen=None) -> "DesignVector":
        Z = np.asarray(x, dtype=float).reshape(-1, 5)
        return cls([PillParams.from_array(z) for z in Z], list(radius_frozen or []))

    def as_array(self) -> np.ndarray:
        """Flat vector of length 5n in block order (px, py, qx, qy, r)."""
        if not self.pills:
            return np.zeros(0)
        return np.concatenate([p.as_array() for p in self.pills])

    def matrix(self) -> np.ndarray:
        return self.as_array().reshape(-1, 5)

    def concat(self, other: "DesignVector") -> "DesignVector":
        return DesignVector(self.pills + other.pills, self.radius_frozen + other.radius_frozen)


@dataclass
class PillBand:
    idx: np.ndarray
    grad: np.ndarray
    hess: np.ndarray


@dataclass
class FieldEvaluation:
    """Element averages of one design with optional derivative data.

    ``rho_points`` (Mp, n) holds per-pill densities at the lattice nodes,
    ``agg`` the aggregate partials there and ``bands`` the per-pill
    derivative data restricted to transition bands.
    """

    grid: GridSpec
    quad: Quadrature
    rho_bar: np.ndarray  # (Ne_eval,)
    rho_points: np.ndarray
    agg: AggJets | None
    bands: list
    aspec: AggregatorSpec
    n_singular: int = 0

    @property
    def n(self) -> int:
        return self.rho_points.shape[1]

    def field(self) -> np.ndarray:
        """Element field on the design domain, shape (ny, nx)."""
        return self.grid.crop(self.rho_bar)

    def point_gradients(self) -> sp.csr_matrix:
        """Sparse (Mp, 5n) matrix of aggregate gradients at the nodes."""
        Mp, n = self.rho_points.shape
        rows, cols, vals = [], [], []
        for a, b in enumerate(self.bands):
            if b.idx.size == 0:
                continue
            g = self.agg.d1[b.idx, a][:, None] * b.grad
            rows.append(np.repeat(b.idx, 5))
            cols.append(np.tile(np.arange(5 * a, 5 * a + 5), b.idx.size))
            vals.append(g.ravel())
        if not rows:
            return sp.csr_matrix((Mp, 5 * n))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(Mp, 5 * n)
        )

    def jacobian(self) -> np.ndarray:
        """Dense (Ne_eval, 5n) Jacobian of the element averages."""
        return np.asarray((self.quad.E @ self.point_gradients()).todense())

    def weighted_hessian(self, omega: np.ndarray) -> np.ndarray:
        """``sum_k omega_k * Hess(A at node k)`` as a dense (5n, 5n) matrix."""
        n = self.n
        H = np.zeros((5 * n, 5 * n))
        agg = self.agg
        for a, b in enumerate(self.bands):
            if b.idx.size == 0:
                continue
            w = omega[b.idx]
            blk = np.einsum("k,kij->ij", w * agg.d1[b.idx, a], b.hess)
            if agg.ddiag is not None:
                wd = w * agg.ddiag[b.idx, a]
                blk += (b.grad * wd[:, None]).T @ b.grad
            H[5 * a : 5 * a + 5, 5 * a : 5 * a + 5] += blk
        if self.aspec.couples:
            active = [b.idx for b in self.bands if b.idx.size]
            if active:
                pts = np.unique(np.concatenate(active))
                wc = omega[pts] * agg.c[pts]
                keep = wc != 0.0
                pts, wc = pts[keep], wc[keep]
                if pts.size:
                    V = np.zeros((pts.size, 5 * n))
                    for a, b in enumerate(self.bands):
                        if b.idx.size == 0:
                            continue
                        loc = np.searchsorted(b.idx, pts)
                        loc = np.minimum(loc, b.idx.size - 1)
                        hit = b.idx[loc] == pts
                        V[hit, 5 * a : 5 * a + 5] = agg.u[pts[hit], a][:, None] * b.grad[loc[hit]]
                    H += (V * wc[:, None]).T @ V
        return 0.5 * (H + H.T)


def _pill_band(args):
    pts, z, tspec, inflate, nudge = args
    rho, idx, g, h, sing = density_band(pts, z, tspec, inflate=inflate)
    ns = int(sing.sum())
    if ns:
        bad = idx[sing]
        moved = pts[bad] + np.array([0.0, nudge])
        r2, i2, g2, h2, _ = density_band(moved, z, tspec, inflate=inflate)
        rho[bad] = r2
        keep = ~sing
        sel = np.zeros(bad.size, dtype=bool)
        sel[i2] = True
        g_full = np.zeros((bad.size, 5))
        h_full = np.zeros((bad.size, 5, 5))
        g_full[i2], h_full[i2] = g2, h2
        idx = np.concatenate([idx[keep], bad[sel]])
        g = np.concatenate([g[keep], g_full[sel]])
        h = np.concatenate([h[keep], h_full[sel]])
        order = np.argsort(idx, kind="stable")
        idx, g, h = idx[order], g[order], h[order]
    return rho, PillBand(idx, g, h), ns


def evaluate_design(Z, tspec: TransitionSpec, aspec: AggregatorSpec, grid: GridSpec, *,
                    inflate: float = 0.0, derivatives: bool = True,
                    threads: int = 1) -> FieldEvaluation:
    """Project a design (``(n, 5)`` array) onto the grid.

    With ``derivatives=False`` only values are computed.  Per-pill work may
    run on ``threads`` workers; results are combined in pill order so the
    output does not depend on the thread count.
    """
    quad = get_quadrature(grid)
    Z = np.asarray(Z, dtype=float).reshape(-1, 5)
    n = Z.shape[0]
    Mp = quad.points.shape[0]
    if n == 0:
        return FieldEvaluation(grid, quad, np.zeros(quad.E.shape[0]), np.zeros((Mp, 0)), None, [], aspec)
    for z in Z:
        PillParams.from_array(z)
    nudge = NUDGE * min(grid.hx, grid.hy)
    if not derivatives:
        from .geometry import unsigned_distances

        rho = np.empty((Mp, n))
        for a, z in enumerate(Z):
            rho[:, a] = tspec.evaluate(unsigned_distances(quad.points, z) - (z[4] + inflate))[0]
        A = aggregate_values(aspec, rho)
        return FieldEvaluation(grid, quad, quad.average(A), rho, None, [], aspec)
    jobs = [(quad.points, z, tspec, inflate, nudge) for z in Z]
    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(_pill_band, jobs))
    else:
        out = [_pill_band(j) for j in jobs]
    rho = np.column_stack([o[0] for o in out])
    bands = [o[1] for o in out]
    agg = aggregate_jets(aspec, rho)
    return FieldEvaluation(grid, quad, quad.average(agg.value), rho, agg, bands, aspec,
                           n_singular=sum(o[2] for o in out))


@dataclass
class ElementField:
    values: np.ndarray  # (ny, nx), row 0 bottom
    grid: GridSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.ny, self.grid.nx):
            raise ValueError(
                f"field shape {self.values.shape} does not match grid {(self.grid.ny, self.grid.nx)}"
            )


def project_field(design, tspec: TransitionSpec, aspec: AggregatorSpec, grid: GridSpec,
                  inflate: float = 0.0) -> ElementField:
    """Element-averaged aggregate density on the design domain."""
    Z = design.matrix() if isinstance(design, DesignVector) else design
    ev = evaluate_design(Z, tspec, aspec, grid, inflate=inflate, derivatives=False)
    return ElementField(ev.field(), grid)


@dataclass
class ElementJet:
    value: float
    grad: np.ndarray
    hess: np.ndarray


def element_average_jet(design, tspec: TransitionSpec, aspec: AggregatorSpec, grid: GridSpec,
                        e: int) -> ElementJet:
    """Value, gradient and Hessian of one design-domain element average."""
    Z = design.matrix() if isinstance(design, DesignVector) else np.asarray(design).reshape(-1, 5)
    if not 0 <= e < grid.n_elements:
        raise IndexError(f"element {e} outside a grid of {grid.n_elements}")
    j, i = divmod(e, grid.nx)
    # evaluate on a one-element grid so the cost does not scale with the mesh
    cell = GridSpec(1, 1, grid.x0 + i * grid.hx, grid.y0 + j * grid.hy, grid.hx, grid.hy,
                    quad_order=grid.quad_order)
    ev = evaluate_design(Z, tspec, aspec, cell)
    row = np.asarray(ev.quad.E[0].todense()).ravel()
    grad = np.asarray((ev.quad.E[0] @ ev.point_gradients()).todense()).ravel()
    return ElementJet(float(ev.rho_bar[0]), grad, ev.weighted_hessian(row))
