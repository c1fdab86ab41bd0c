"""
Capsule ("pill") geometry: unsigned/signed distance and exact derivatives.

A pill is the set of points within distance ``r`` of the segment PQ.  Its
design block is ``z = (px, py, qx, qy, r)``.  The distance is assembled from
three branches: distance to P, distance to Q, and the perpendicular offset
to the supporting line.  The line offset is only a distance to the *finite*
segment when the orthogonal projection of the query point falls inside PQ,
so branch selection uses the projection parameter rather than a bare
minimum over the three candidates.

Derivatives of the segment branch are assembled from the partials of the
numerator ``N`` and denominator ``D`` of ``d_seg = |N| / D`` (quotient rule),
not from hand-written closed forms for all fifteen Hessian entries.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

EPS_SING = 1e-12

# constant second derivatives of N (bilinear) in (px, py, qx, qy)
_D2N = np.array(
    [
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0, 0.0],
        [0.0, -1.0, 0.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
    ]
)


class GeometryError(ValueError):
    """Raised for degenerate pills (coincident endpoints, non-positive radius)."""


class Branch(enum.IntEnum):
    SEGMENT = 0
    POINT_P = 1
    POINT_Q = 2


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise GeometryError(f"non-finite point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class PillParams:
    """Two endpoints and a radius; the 5-vector ``(px, py, qx, qy, r)``."""

    px: float
    py: float
    qx: float
    qy: float
    r: float

    def __post_init__(self):
        vals = (self.px, self.py, self.qx, self.qy, self.r)
        if not all(np.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite pill parameters {vals}")
        if self.r <= 0.0:
            raise GeometryError(f"radius must be positive, got {self.r}")
        if self.length == 0.0:
            raise GeometryError("degenerate pill: P == Q")

    @classmethod
    def from_array(cls, z) -> "PillParams":
        z = np.asarray(z, dtype=float)
        return cls(*(float(v) for v in z[:5]))

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.qx, self.qy, self.r], dtype=float)

    @property
    def length(self) -> float:
        return float(np.hypot(self.qx - self.px, self.qy - self.py))

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.px + self.qx) / 2.0, (self.py + self.qy) / 2.0])

    @property
    def normal(self) -> np.ndarray:
        """Unit normal ``n = (-u0_y, u0_x)`` of the segment direction."""
        d = self.length
        return np.array([-(self.qy - self.py) / d, (self.qx - self.px) / d])


@dataclass
class DistanceJet:
    value: float
    grad: np.ndarray
    hess: np.ndarray
    branch: Branch
    singular: bool = False


def _check_length(D: float) -> None:
    if not D > 0.0:
        raise GeometryError("degenerate pill: P == Q")


def _as_points(x) -> np.ndarray:
    if isinstance(x, Point2):
        return x.as_array()[None, :]
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    return pts


def select_branch(points: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Active branch per point from the projection parameter along PQ.

    Ties (projection exactly at an endpoint) resolve to the segment branch;
    the derivatives agree there so the choice is not observable.
    """
    px, py, qx, qy = z[0], z[1], z[2], z[3]
    ux, uy = qx - px, qy - py
    D2 = ux * ux + uy * uy
    t = (points[:, 0] - px) * ux + (points[:, 1] - py) * uy
    branch = np.full(points.shape[0], Branch.SEGMENT, dtype=np.int8)
    branch[t < 0.0] = Branch.POINT_P
    branch[t > D2] = Branch.POINT_Q
    return branch


def unsigned_distances(points, z) -> np.ndarray:
    """Vectorized unsigned distance of ``points`` (M, 2) to pill ``z``."""
    pts = _as_points(points)
    z = np.asarray(z, dtype=float)
    px, py, qx, qy = z[0], z[1], z[2], z[3]
    D = float(np.hypot(qx - px, qy - py))
    _check_length(D)
    branch = select_branch(pts, z)
    x1, x2 = pts[:, 0], pts[:, 1]
    N = (x1 - qx) * (py - qy) + (x2 - qy) * (qx - px)
    out = np.abs(N) / D
    m = branch == Branch.POINT_P
    out[m] = np.hypot(x1[m] - px, x2[m] - py)
    m = branch == Branch.POINT_Q
    out[m] = np.hypot(x1[m] - qx, x2[m] - qy)
    return out


def unsigned_distance(x: Point2, pill: PillParams) -> float:
    return float(unsigned_distances(x, pill.as_array())[0])


def signed_distance(x: Point2, pill: PillParams) -> float:
    return unsigned_distance(x, pill) - pill.r


def distance_jets(points, z, *, signed: bool = True, inflate: float = 0.0,
                  eps_sing: float = EPS_SING, force_branch: Branch | None = None):
    """Distance values, gradients and Hessians w.r.t. the 5 pill parameters.

    Parameters
    ----------
    points : array_like, shape (M, 2)
    z : array_like, shape (5,)
        ``(px, py, qx, qy, r)``.
    signed : bool
        Subtract ``r + inflate`` from the distance (radius slot gradient -1).
    inflate : float
        Radius inflation added inside the signed distance only.
    eps_sing : float
        Points closer than this to P, Q (point branches) or to the supporting
        line (segment branch) are flagged as singular.
    force_branch : Branch, optional
        Evaluate this branch's formula at every point instead of the active
        one (used to compare branches on the transition set).

    Returns
    -------
    value : ndarray (M,)
    grad : ndarray (M, 5)
    hess : ndarray (M, 5, 5)
    branch : ndarray (M,) of ``Branch`` codes
    singular : ndarray (M,) bool
    """
    pts = _as_points(points)
    z = np.asarray(z, dtype=float)
    M = pts.shape[0]
    px, py, qx, qy = z[0], z[1], z[2], z[3]
    D = float(np.hypot(px - qx, py - qy))
    _check_length(D)

    if force_branch is None:
        branch = select_branch(pts, z)
    else:
        branch = np.full(M, Branch(force_branch), dtype=np.int8)
    x1, x2 = pts[:, 0], pts[:, 1]
    value = np.empty(M)
    grad = np.zeros((M, 5))
    hess = np.zeros((M, 5, 5))
    singular = np.zeros(M, dtype=bool)

    # segment branch
    s = branch == Branch.SEGMENT
    if np.any(s):
        a1, a2 = x1[s] - qx, x2[s] - qy
        N = a1 * (py - qy) + a2 * (qx - px)
        absN = np.abs(N)
        sg = np.sign(N)
        singular[s] = absN / D <= eps_sing
        dN = np.stack(
            [-a2, a1, -(py - qy) + a2, (px - qx) - a1], axis=1
        )  # (Ms, 4)
        dD = np.array([px - qx, py - qy, qx - px, qy - py]) / D
        d2D = np.array(
            [
                [(py - qy) ** 2, -(px - qx) * (py - qy), -(py - qy) ** 2, (px - qx) * (py - qy)],
                [-(px - qx) * (py - qy), (px - qx) ** 2, (px - qx) * (py - qy), -(px - qx) ** 2],
                [-(py - qy) ** 2, (px - qx) * (py - qy), (py - qy) ** 2, -(px - qx) * (py - qy)],
                [(px - qx) * (py - qy), -(px - qx) ** 2, -(px - qx) * (py - qy), (px - qx) ** 2],
            ]
        ) / D**3
        value[s] = absN / D
        grad[s, :4] = sg[:, None] * dN / D - absN[:, None] * dD[None, :] / D**2
        cross = dN[:, :, None] * dD[None, None, :] + dD[None, :, None] * dN[:, None, :]
        curv = 2.0 * np.outer(dD, dD) / D - d2D
        hess[s, :4, :4] = (
            sg[:, None, None] * _D2N[None] / D
            - sg[:, None, None] * cross / D**2
            + (absN / D**2)[:, None, None] * curv[None]
        )

    # endpoint branches; P occupies slots 0,1 and Q slots 2,3
    for code, cx, cy, o in ((Branch.POINT_P, px, py, 0), (Branch.POINT_Q, qx, qy, 2)):
        m = branch == code
        if not np.any(m):
            continue
        ex, ey = x1[m] - cx, x2[m] - cy
        rr = np.hypot(ex, ey)
        singular[m] = rr <= eps_sing
        rs = np.where(rr > 0.0, rr, 1.0)
        value[m] = rr
        grad[m, o] = -ex / rs
        grad[m, o + 1] = -ey / rs
        r3 = rs**3
        hess[m, o, o] = ey * ey / r3
        hess[m, o + 1, o + 1] = ex * ex / r3
        hess[m, o, o + 1] = hess[m, o + 1, o] = -ex * ey / r3

    if signed:
        value -= z[4] + inflate
        grad[:, 4] = -1.0
    return value, grad, hess, branch, singular


def distance_jet(x: Point2, pill: PillParams, signed: bool = False,
                 eps_sing: float = EPS_SING) -> DistanceJet:
    """Single-point distance jet with branch tag and singularity flag."""
    v, g, h, b, sing = distance_jets(x, pill.as_array(), signed=signed, eps_sing=eps_sing)
    return DistanceJet(float(v[0]), g[0], h[0], Branch(int(b[0])), bool(sing[0]))
