"""
Aggregation operators combining per-pill densities into one field value.

Every operator here has a Hessian (w.r.t. the per-pill densities) of the
form ``diag(D) + c * u u^T``.  The vectorized kernel returns that structured
representation so callers never materialize ``n x n`` matrices per point;
:func:`aggregate_partials` expands it for single-point use.

Supported kinds: ``sum``, ``pnorm`` (``p``), ``softmax`` (log-sum-exp,
``beta``), ``softcap`` (identity inner map, ``tau``, ``beta_c``) and
``cosine`` (``N``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

KINDS = ("sum", "pnorm", "softmax", "softcap", "cosine")

EPS_RHO = 1e-12


@dataclass(frozen=True)
class AggregatorSpec:
    kind: str = "pnorm"
    p: float = 9.0
    beta: float = 10.0
    tau: float = 1.1
    beta_c: float = 18.0
    N: float = 2.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown aggregator {self.kind!r}; expected one of {KINDS}")
        if self.kind == "pnorm" and not self.p > 1:
            raise ValueError("p-norm requires p > 1")
        if self.kind == "softmax" and not self.beta > 0:
            raise ValueError("softmax requires beta > 0")
        if self.kind == "softcap" and not (self.tau > 0 and self.beta_c > 0):
            raise ValueError("softcap requires tau > 0 and beta_c > 0")
        if self.kind == "cosine" and not self.N > 1:
            raise ValueError("cosine shaping requires N > 1")

    @property
    def couples(self) -> bool:
        """Whether the Hessian has cross-pill terms."""
        return self.kind != "sum"


@dataclass
class AggPartials:
    value: float
    d1: np.ndarray
    d2: np.ndarray


@dataclass
class AggJets:
    """Vectorized partials; the Hessian at point k is ``diag(ddiag[k]) + c[k] u[k] u[k]^T``."""

    value: np.ndarray  # (M,)
    d1: np.ndarray  # (M, n)
    ddiag: np.ndarray  # (M, n) or None when identically zero
    c: np.ndarray  # (M,)
    u: np.ndarray  # (M, n)


def _cosine_profile(S, N):
    a = 1.0 - (N - 1.0) ** 2 / 2.0
    A = np.full_like(S, a)
    A1 = np.zeros_like(S)
    A2 = np.zeros_like(S)
    lo = S <= 1.0
    w = 0.5 * np.pi
    A[lo] = np.sin(w * S[lo])
    A1[lo] = w * np.cos(w * S[lo])
    A2[lo] = -w * w * np.sin(w * S[lo])
    mid = (S > 1.0) & (S < N)
    k = np.pi / (N - 1.0)
    th = k * (S[mid] - 1.0)
    A[mid] = a + (1.0 - a) * (1.0 + np.cos(th)) / 2.0
    A1[mid] = -(1.0 - a) * k * np.sin(th) / 2.0
    A2[mid] = -(1.0 - a) * k * k * np.cos(th) / 2.0
    return A, A1, A2


def _smooth_max(rho, beta):
    # shifting by the max keeps max <= value <= max + log(n)/beta in floating point
    m = rho.max(axis=-1)
    return m + logsumexp(beta * (rho - m[..., None]), axis=-1) / beta


def aggregate_values(spec: AggregatorSpec, rho) -> np.ndarray:
    """Aggregate along the last axis of ``rho`` (shape ``(..., n)``)."""
    rho = np.asarray(rho, dtype=float)
    if rho.shape[-1] == 0:
        raise ValueError("aggregation needs at least one density")
    if spec.kind == "sum":
        return rho.sum(axis=-1)
    if spec.kind == "pnorm":
        # roundoff can leave transition values a hair below zero
        rho = np.maximum(rho, 0.0)
        m = rho.max(axis=-1)
        ms = np.where(m > 0.0, m, 1.0)
        T = ((rho / ms[..., None]) ** spec.p).sum(axis=-1)
        return np.where(m > 0.0, ms * T ** (1.0 / spec.p), 0.0)
    if spec.kind == "softmax":
        return _smooth_max(rho, spec.beta)
    S = rho.sum(axis=-1)
    if spec.kind == "softcap":
        return spec.tau - np.logaddexp(0.0, spec.beta_c * (spec.tau - S)) / spec.beta_c
    return _cosine_profile(np.atleast_1d(S), spec.N)[0].reshape(S.shape)


def aggregate_jets(spec: AggregatorSpec, rho) -> AggJets:
    """Values and structured partials for ``rho`` of shape ``(M, n)``."""
    rho = np.asarray(rho, dtype=float)
    if rho.ndim != 2 or rho.shape[1] == 0:
        raise ValueError("expected densities of shape (M, n) with n >= 1")
    M, n = rho.shape
    ones = np.ones((M, n))
    if spec.kind == "sum":
        return AggJets(rho.sum(axis=1), ones, None, np.zeros(M), ones)
    if spec.kind == "pnorm":
        p = spec.p
        value = aggregate_values(spec, rho)
        r_ = np.maximum(rho, EPS_RHO)
        m = r_.max(axis=1)
        r = r_ / m[:, None]
        T = (r**p).sum(axis=1)
        rp1 = r ** (p - 1.0)
        d1 = T[:, None] ** (1.0 / p - 1.0) * rp1
        ddiag = (T ** (1.0 / p - 1.0) * (p - 1.0) / m)[:, None] * r ** (p - 2.0)
        c = (1.0 - p) * T ** (1.0 / p - 2.0) / m
        return AggJets(value, d1, ddiag, c, rp1)
    if spec.kind == "softmax":
        b = spec.beta
        value = _smooth_max(rho, b)
        w = np.exp(b * (rho - rho.max(axis=1, keepdims=True)))
        w /= w.sum(axis=1, keepdims=True)
        return AggJets(value, w, b * w, np.full(M, -b), w)
    S = rho.sum(axis=1)
    if spec.kind == "softcap":
        bc, tau = spec.beta_c, spec.tau
        value = tau - np.logaddexp(0.0, bc * (tau - S)) / bc
        # derivative of the softplus cap; saturates (g1 -> 0) for S >> tau
        g1 = expit(bc * (tau - S))
        g2 = -bc * g1 * (1.0 - g1)
    else:
        value, g1, g2 = _cosine_profile(S, spec.N)
    return AggJets(value, g1[:, None] * ones, None, g2, ones)


def aggregate_value(spec: AggregatorSpec, rho) -> float:
    rho = np.asarray(rho, dtype=float)
    if rho.ndim != 1 or rho.size == 0:
        raise ValueError("expected a non-empty 1D density vector")
    return float(aggregate_values(spec, rho[None, :])[0])


def aggregate_partials(spec: AggregatorSpec, rho) -> AggPartials:
    """Value, gradient and dense Hessian w.r.t. the densities at one point."""
    rho = np.asarray(rho, dtype=float)
    if rho.ndim != 1 or rho.size == 0:
        raise ValueError("expected a non-empty 1D density vector")
    j = aggregate_jets(spec, rho[None, :])
    u = j.u[0]
    d2 = j.c[0] * np.outer(u, u)
    if j.ddiag is not None:
        d2 += np.diag(j.ddiag[0])
    return AggPartials(float(j.value[0]), j.d1[0].copy(), d2)


def softmax_weights(beta: float, rho) -> np.ndarray:
    """Convex weights ``w_m`` of the log-sum-exp aggregator."""
    return aggregate_jets(AggregatorSpec("softmax", beta=beta), np.atleast_2d(rho)).d1[0]
