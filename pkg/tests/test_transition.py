import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from pillmap.geometry import PillParams, Point2
from pillmap.gradcheck import gradcheck, random_pill
from pillmap.transition import (
    TransitionSpec,
    pseudo_density_jet,
    smoothstep_coeffs,
    smoothstep_polynomial,
    smoothstep_profile,
    transition_eval,
)


def endpoint_system_coeffs(k):
    """Solve p(0)=1, p(1)=0, p^(j)(0)=p^(j)(1)=0 (j=1..k) for degree 2k+1.

    Exact rational Gauss-Jordan elimination; the monomial system is too
    ill-conditioned for floating point beyond k ~ 6.
    """
    n = 2 * k + 2
    rows = []
    for x0, val in ((0, 1), (1, 0)):
        for j in range(k + 1):
            row = [Fraction(math.perm(i, j) * x0 ** (i - j)) if i >= j else Fraction(0) for i in range(n)]
            rows.append(row + [Fraction(val if j == 0 else 0)])
    for col in range(n):
        piv = next(r for r in range(col, n) if rows[r][col] != 0)
        rows[col], rows[piv] = rows[piv], rows[col]
        rows[col] = [v / rows[col][col] for v in rows[col]]
        for r in range(n):
            if r != col and rows[r][col] != 0:
                f = rows[r][col]
                rows[r] = [a - f * b for a, b in zip(rows[r], rows[col])]
    return np.array([float(r[-1]) for r in rows])


def test_k2_coefficients_exact():
    c = smoothstep_polynomial(2)
    nonzero = [(p, v) for p, v in enumerate(c) if v != 0.0]
    assert nonzero == [(0, 1.0), (3, -10.0), (4, 15.0), (5, -6.0)]
    assert list(smoothstep_coeffs(2)) == [-10.0, 15.0, -6.0]


def test_k0_linear_ramp():
    assert smoothstep_polynomial(0) == (1.0, -1.0)


@pytest.mark.parametrize("k", range(11))
def test_coefficients_match_linear_system(k):
    assert_allclose(smoothstep_polynomial(k), endpoint_system_coeffs(k), rtol=1e-15, atol=0)


@pytest.mark.parametrize("k", range(6))
def test_endpoint_derivatives_vanish(k):
    poly = np.polynomial.Polynomial(smoothstep_polynomial(k))
    assert poly(0.0) == pytest.approx(1.0, abs=1e-12)
    assert poly(1.0) == pytest.approx(0.0, abs=1e-12)
    for j in range(1, k + 1):
        dj = poly.deriv(j)
        assert abs(dj(0.0)) < 1e-10
        assert abs(dj(1.0)) < 1e-10


@pytest.mark.parametrize("k", [-1, 11, 2.5])
def test_coefficient_order_range(k):
    with pytest.raises(ValueError):
        smoothstep_coeffs(k)


def test_profile_derivatives_match_polynomial():
    t = np.linspace(0, 1, 11)
    p, dp, d2p = smoothstep_profile(3, t)
    poly = np.polynomial.Polynomial(smoothstep_polynomial(3))
    assert_allclose(p, poly(t), atol=1e-13)
    assert_allclose(dp, poly.deriv()(t), atol=1e-12)
    assert_allclose(d2p, poly.deriv(2)(t), atol=1e-11)


def test_smoothstep_half_at_interface():
    assert transition_eval(TransitionSpec.smoothstep(2, 0.05), 0.0).value == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("d", [-0.05, 0.05])
def test_smoothstep_flat_at_band_edges(d):
    jet = transition_eval(TransitionSpec.smoothstep(3, 0.05), d)
    assert jet.d1 == 0.0 and jet.d2 == 0.0


def test_plateaus():
    spec = TransitionSpec.smoothstep(3, 0.05)
    assert transition_eval(spec, -0.2).value == 1.0
    assert transition_eval(spec, 0.2).value == 0.0


def test_tanh_center_slope():
    jet = transition_eval(TransitionSpec.tanh(8.0, 0.05), 0.0)
    assert jet.value == pytest.approx(0.5)
    assert jet.d1 == pytest.approx(-80.0)


def test_tanh_clipping_kink_is_nonzero():
    beta, delta = 8.0, 0.05
    spec = TransitionSpec.tanh(beta, delta)
    expected = beta / (2 * delta) / math.cosh(beta) ** 2
    inside = transition_eval(spec, delta * (1 - 1e-9))
    assert abs(inside.d1) == pytest.approx(expected, rel=1e-6)
    assert abs(inside.d1) > 0


def test_asymmetric_slope_ratio():
    spec = TransitionSpec.asymmetric(2, 0.1, 0.1)
    left = transition_eval(spec, -1e-12).d1
    right = transition_eval(spec, 1e-12).d1
    assert left / right == pytest.approx(3.0, rel=1e-9)
    assert transition_eval(spec, 0.0).value == pytest.approx(0.5)


def test_asymmetric_support():
    spec = TransitionSpec.asymmetric(3, 0.1, 0.2)
    assert spec.support == pytest.approx((-0.05, 0.25))
    for d in spec.support:
        jet = transition_eval(spec, d)
        assert jet.d1 == 0.0 and jet.d2 == 0.0


@settings(max_examples=200, deadline=None)
@given(a=st.floats(-0.2, 0.2), b=st.floats(-0.2, 0.2), k=st.integers(0, 6))
def test_monotone_decreasing(a, b, k):
    spec = TransitionSpec.smoothstep(k, 0.05)
    lo, hi = sorted((a, b))
    assert transition_eval(spec, lo).value >= transition_eval(spec, hi).value
    jet = transition_eval(spec, a)
    assert 0.0 <= jet.value <= 1.0
    assert jet.d1 <= 0.0


@pytest.mark.parametrize("kw", [dict(kind="smoothstep", k=-1, delta=0.05), dict(kind="tanh", beta=0.0, delta=0.05),
                                dict(kind="smoothstep", k=3, delta=0.0), dict(kind="asymmetric", k=3, delta=0.05, ext=-1)])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        TransitionSpec(**kw)


def test_density_plateaus():
    spec = TransitionSpec.smoothstep(3, 0.05)
    pill = PillParams(0.2, 0.5, 0.8, 0.5, 0.1)
    inside = pseudo_density_jet(spec, pill, Point2(0.5, 0.5))
    assert inside.value == 1.0 and not inside.grad.any() and not inside.hess.any()
    outside = pseudo_density_jet(spec, pill, Point2(0.5, 0.9))
    assert outside.value == 0.0 and not outside.grad.any() and not outside.hess.any()


def test_density_radius_derivatives():
    spec = TransitionSpec.smoothstep(3, 0.05)
    pill = PillParams(0.2, 0.5, 0.8, 0.5, 0.1)
    x = Point2(0.5, 0.62)
    d = 0.12 - 0.1
    phi = transition_eval(spec, d)
    jet = pseudo_density_jet(spec, pill, x)
    assert jet.grad[4] == pytest.approx(-phi.d1, rel=1e-12)
    assert jet.hess[4, 4] == pytest.approx(phi.d2, rel=1e-12)


@pytest.mark.parametrize("spec", [TransitionSpec.smoothstep(3, 0.05), TransitionSpec.tanh(4.0, 0.05),
                                  TransitionSpec.asymmetric(3, 0.05, 0.1)])
def test_density_finite_differences(spec):
    rng = np.random.default_rng(5)
    lo, hi = spec.support
    for _ in range(30):
        z = random_pill(rng)
        P, Q = z[:2], z[2:4]
        u = (Q - P) / np.hypot(*(Q - P))
        # skip the C^0 medial interface of the asymmetric transition
        off = rng.uniform(0.02, 0.98) * (hi - lo) + lo
        if spec.kind == "asymmetric" and abs(off) < 1e-3:
            continue
        x = P + rng.uniform(0.1, 0.9) * (Q - P) + (z[4] + off) * np.array([-u[1], u[0]])
        rep = gradcheck(lambda v: pseudo_density_jet(spec, PillParams.from_array(v), x), z)
        assert rep.max_grad_error < 1e-6
        assert rep.max_hess_error < 1e-4
