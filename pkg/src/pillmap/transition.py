"""
Transition functions mapping signed distance to a pseudo-density in [0, 1].

Three families are provided:

* ``tanh``: ``0.5 * (1 - tanh(beta * d / delta))`` clipped to the band
  ``|d| < delta``.  Clipping leaves a small jump and residual slope at the
  band edges.
* ``smoothstep``: the minimal-degree polynomial ``p`` of degree ``2k + 1``
  with ``p(0) = 1``, ``p(1) = 0`` and vanishing derivatives up to order
  ``k`` at both ends, evaluated at ``t = (d + delta) / (2 delta)``.
* ``asymmetric``: the same smoothstep profile with interior half-width
  ``h = delta / 2`` and an exterior flank stretched by ``ext``.  The value is
  continuous at ``d = 0`` while the slope jumps by ``(h + ext) / h``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb

import numpy as np

from .geometry import distance_jets, unsigned_distances

KINDS = ("tanh", "smoothstep", "asymmetric")


@lru_cache(maxsize=None)
def smoothstep_polynomial(k: int) -> tuple:
    """Full monomial coefficients (ascending powers) of the degree 2k+1 profile."""
    c = [0.0] * (2 * k + 2)
    c[0] = 1.0
    for m, cm in enumerate(smoothstep_coeffs(k)):
        c[k + 1 + m] = cm
    return tuple(c)


def smoothstep_coeffs(k: int) -> np.ndarray:
    """Coefficients of ``t**(k+1+m)``, ``m = 0..k``, of the C^k smoothstep.

    The full profile is ``1 + sum_m c_m t**(k+1+m)``.

    >>> smoothstep_coeffs(2)
    array([-10.,  15.,  -6.])
    """
    if not isinstance(k, (int, np.integer)) or not 0 <= k <= 10:
        raise ValueError(f"smoothstep order k must be an integer in [0, 10], got {k!r}")
    k = int(k)
    return np.array(
        [float((-1) ** (m + 1) * comb(2 * k + 1, k + 1 + m) * comb(k + m, m)) for m in range(k + 1)]
    )


def _poly_eval(coef, t):
    """Horner evaluation of ``p``, ``p'`` and ``p''`` for ascending coefficients."""
    t = np.asarray(t, dtype=float)
    p = np.zeros_like(t)
    dp = np.zeros_like(t)
    d2p = np.zeros_like(t)
    for c in reversed(coef):
        d2p = d2p * t + 2.0 * dp
        dp = dp * t + p
        p = p * t + c
    return p, dp, d2p


def smoothstep_profile(k: int, t):
    """Evaluate the C^k smoothstep ``p(t)`` and its first two derivatives."""
    return _poly_eval(smoothstep_polynomial(int(k)), t)


@dataclass(frozen=True)
class TransitionSpec:
    """Transition family and half-width.

    Parameters
    ----------
    kind : {"tanh", "smoothstep", "asymmetric"}
    delta : float
        Half-width of the transition band.
    beta : float
        Steepness of the tanh family.
    k : int
        Smoothness order of the polynomial families.
    ext : float
        Exterior flank extension of the asymmetric family.
    """

    kind: str = "smoothstep"
    delta: float = 0.05
    beta: float = 8.0
    k: int = 3
    ext: float = 0.0
    _coef: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transition kind {self.kind!r}; expected one of {KINDS}")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.ext < 0:
            raise ValueError("ext must be non-negative")
        # validates k as a side effect
        smoothstep_coeffs(self.k)
        object.__setattr__(self, "_coef", smoothstep_polynomial(int(self.k)))

    @classmethod
    def tanh(cls, beta: float, delta: float) -> "TransitionSpec":
        return cls(kind="tanh", beta=beta, delta=delta)

    @classmethod
    def smoothstep(cls, k: int, delta: float) -> "TransitionSpec":
        return cls(kind="smoothstep", k=k, delta=delta)

    @classmethod
    def asymmetric(cls, k: int, delta: float, ext: float) -> "TransitionSpec":
        return cls(kind="asymmetric", k=k, delta=delta, ext=ext)

    @property
    def support(self) -> tuple[float, float]:
        """Open interval of signed distances with nonzero derivatives."""
        if self.kind == "asymmetric":
            h = self.delta / 2.0
            return -h, h + self.ext
        return -self.delta, self.delta

    def evaluate(self, d):
        """Vectorized ``(value, d1, d2)`` of the clipped transition."""
        d = np.asarray(d, dtype=float)
        lo, hi = self.support
        val = np.where(d <= lo, 1.0, 0.0)
        d1 = np.zeros_like(d)
        d2 = np.zeros_like(d)
        band = (d > lo) & (d < hi)
        if not np.any(band):
            return val, d1, d2
        db = d[band]
        if self.kind == "tanh":
            s = self.beta / self.delta
            th = np.tanh(s * db)
            sech2 = 1.0 - th * th
            val[band] = 0.5 * (1.0 - th)
            d1[band] = -0.5 * s * sech2
            d2[band] = s * s * sech2 * th
        elif self.kind == "smoothstep":
            scale = 1.0 / (2.0 * self.delta)
            p, dp, d2p = _poly_eval(self._coef, (db + self.delta) * scale)
            val[band] = p
            d1[band] = dp * scale
            d2[band] = d2p * scale * scale
        else:
            h = self.delta / 2.0
            # inner flank on (-h, 0], outer flank on (0, h + ext)
            scale = np.where(db <= 0.0, 1.0 / (2.0 * h), 1.0 / (2.0 * (h + self.ext)))
            t = 0.5 + db * scale
            p, dp, d2p = _poly_eval(self._coef, t)
            val[band] = p
            d1[band] = dp * scale
            d2[band] = d2p * scale * scale
        return val, d1, d2


@dataclass
class TransitionJet:
    value: float
    d1: float
    d2: float


def transition_eval(spec: TransitionSpec, d: float) -> TransitionJet:
    v, d1, d2 = spec.evaluate(np.array([d], dtype=float))
    return TransitionJet(float(v[0]), float(d1[0]), float(d2[0]))


def density_band(points, z, spec: TransitionSpec, *, inflate: float = 0.0):
    """Pseudo-density of one pill with derivatives restricted to its band.

    Returns
    -------
    rho : ndarray (M,)
        Values at all points.
    idx : ndarray (K,)
        Indices of points inside the transition band.
    grad, hess : ndarray (K, 5), (K, 5, 5)
        Derivatives at ``points[idx]``; zero elsewhere by construction.
    singular : ndarray (K,) bool
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    z = np.asarray(z, dtype=float)
    d = unsigned_distances(pts, z) - (z[4] + inflate)
    rho, _, _ = spec.evaluate(d)
    lo, hi = spec.support
    idx = np.nonzero((d > lo) & (d < hi))[0]
    if idx.size == 0:
        return rho, idx, np.zeros((0, 5)), np.zeros((0, 5, 5)), np.zeros(0, dtype=bool)
    dv, dg, dh, _, sing = distance_jets(pts[idx], z, signed=True, inflate=inflate)
    _, f1, f2 = spec.evaluate(dv)
    grad = f1[:, None] * dg
    hess = f2[:, None, None] * dg[:, :, None] * dg[:, None, :] + f1[:, None, None] * dh
    return rho, idx, grad, hess, sing


def density_jets(points, z, spec: TransitionSpec, *, inflate: float = 0.0):
    """Dense pseudo-density jets ``(rho, grad, hess, singular)`` at all points."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    dv, dg, dh, _, sing = distance_jets(pts, z, signed=True, inflate=inflate)
    rho, f1, f2 = spec.evaluate(dv)
    grad = f1[:, None] * dg
    hess = f2[:, None, None] * dg[:, :, None] * dg[:, None, :] + f1[:, None, None] * dh
    return rho, grad, hess, sing


@dataclass
class ScalarJet:
    value: float
    grad: np.ndarray
    hess: np.ndarray
    singular: bool = False


def pseudo_density_jet(spec: TransitionSpec, pill, x) -> ScalarJet:
    """Single-point pseudo-density jet of a pill (``PillParams``)."""
    pt = np.array([x.x, x.y]) if hasattr(x, "x") else np.asarray(x, dtype=float)
    rho, g, h, sing = density_jets(pt, pill.as_array(), spec)
    return ScalarJet(float(rho[0]), g[0], h[0], bool(sing[0]))
