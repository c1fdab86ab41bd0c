import numpy as np
import pytest
from numpy.testing import assert_allclose

from pillmap.aggregation import AggregatorSpec
from pillmap.grid import DesignVector, GridSpec, project_field
from pillmap.objective import ConstraintSet, Objective, ObjectiveJet, TargetField
from pillmap.solver import (
    SolveOptions,
    SolverError,
    Termination,
    is_feasible,
    minimize,
    pd_shift,
    shifted_solve,
)
from pillmap.transition import TransitionSpec

OPEN = ConstraintSet((-10, -10, 10, 10), r_min=0.0, l_min=0.0)
TS = TransitionSpec.smoothstep(3, 0.05)
SUM = AggregatorSpec("sum")


def quadratic(A, c):
    def problem(x, order=2):
        d = x - c
        return ObjectiveJet(0.5 * d @ A @ d, A @ d, A)

    return problem


@pytest.fixture
def spd():
    B = np.random.default_rng(0).normal(size=(5, 5))
    return B @ B.T + 5 * np.eye(5)


@pytest.mark.parametrize("offset, max_step", [(0.1, 0.25), (2.0, 10.0)])
def test_newton_exact_on_quadratic(spd, offset, max_step):
    c = np.array([0.3, 0.4, 0.6, 0.7, 0.2])
    res = minimize(quadratic(spd, c), c + offset, SolveOptions(tol=1e-12, max_step=max_step), OPEN)
    assert res.iterations <= 2
    assert np.linalg.norm(spd @ (res.x - c)) < 1e-10


def test_lbfgs_on_quadratic(spd):
    c = np.array([0.3, 0.4, 0.6, 0.7, 0.2])
    opts = SolveOptions(tol=1e-12, hessian_mode="lbfgs", lbfgs_history=3, max_iter=200)
    res = minimize(quadratic(spd, c), c + 0.1, opts, OPEN)
    assert res.objective < 1e-12


def test_box_face_kkt():
    box = ConstraintSet((0, 0, 1, 1), r_min=0.0, l_min=0.0)
    c = np.array([1.5, 0.5, 0.5, -0.3, 0.2])
    res = minimize(quadratic(np.eye(5), c), np.array([0.5, 0.5, 0.6, 0.5, 0.2]), SolveOptions(tol=1e-12), box)
    assert_allclose(res.x, [1.0, 0.5, 0.5, 0.0, 0.2], atol=1e-12)
    g = res.x - c
    lo, hi = box.bounds(1)
    at_hi = res.x >= hi
    at_lo = res.x <= lo
    assert np.all(g[at_hi] <= 0) and np.all(g[at_lo] >= 0)
    assert np.abs(g[~(at_hi | at_lo)]).max() < 1e-12


def test_single_pill_favorable_overlap():
    g = GridSpec(100, 100)
    zt = np.array([0.3, 0.35, 0.7, 0.6, 0.1])
    target = TargetField(project_field(zt, TS, SUM, g).values, g)
    obj = Objective("tracking", target, TS, SUM)
    x0 = zt + np.array([0.04, -0.03, -0.05, 0.03, 0.02])
    cons = ConstraintSet.for_grid(g, r_min=0.05, l_min=0.005)
    res = minimize(obj, x0, SolveOptions(tol=1e-10, max_iter=50), cons)
    assert res.objective < 1e-6
    assert res.iterations <= 50
    assert_allclose(res.x, zt, atol=1e-4)


def _void_problem(n=20):
    g = GridSpec(n, n)
    return Objective("tracking", TargetField(np.zeros((n, n)), g), TS, SUM), g


def test_trace_monotone_and_feasible():
    obj, g = _void_problem()
    cons = ConstraintSet.for_grid(g, r_min=0.05, l_min=0.05)
    res = minimize(obj, np.array([0.3, 0.4, 0.6, 0.7, 0.1]), SolveOptions(tol=1e-7), cons)
    assert len(res.objective_trace) >= 1
    assert all(b <= a for a, b in zip(res.objective_trace, res.objective_trace[1:]))
    assert res.feasible and is_feasible(res.x, cons)
    lo, hi = cons.bounds(1)
    assert np.all(res.x >= lo) and np.all(res.x <= hi)
    assert np.hypot(res.x[2] - res.x[0], res.x[3] - res.x[1]) >= 0.05 - 1e-8


def test_frozen_radius_exact():
    obj, g = _void_problem()
    cons = ConstraintSet.for_grid(g, r_min=0.02, l_min=0.05)
    x0 = DesignVector.from_array([[0.3, 0.4, 0.6, 0.7, 0.0712345], [0.2, 0.2, 0.4, 0.3, 0.09]],
                                 radius_frozen=[True, False])
    res = minimize(obj, x0, SolveOptions(tol=1e-7, max_iter=20), cons)
    assert res.x[4] == 0.0712345
    assert res.x[9] != 0.09


def test_deterministic():
    obj, g = _void_problem()
    cons = ConstraintSet.for_grid(g, r_min=0.05, l_min=0.05)
    x0 = np.array([0.3, 0.4, 0.6, 0.7, 0.1, 0.2, 0.7, 0.5, 0.8, 0.08])
    a = minimize(obj, x0, SolveOptions(tol=1e-7), cons)
    b = minimize(obj, x0, SolveOptions(tol=1e-7), cons)
    assert np.array_equal(a.x, b.x)
    assert a.objective_trace == b.objective_trace
    assert a.eval_trace == b.eval_trace


def test_eval_offset_shifts_trace():
    obj, g = _void_problem()
    cons = ConstraintSet.for_grid(g, r_min=0.05, l_min=0.05)
    x0 = np.array([0.3, 0.4, 0.6, 0.7, 0.1])
    a = minimize(obj, x0, SolveOptions(tol=1e-3), cons)
    b = minimize(obj, x0, SolveOptions(tol=1e-3), cons, eval_offset=100)
    assert [e + 100 for e in a.eval_trace] == b.eval_trace


def test_max_iter_termination():
    obj, g = _void_problem()
    cons = ConstraintSet.for_grid(g, r_min=0.05, l_min=0.05)
    res = minimize(obj, np.array([0.3, 0.4, 0.6, 0.7, 0.2]), SolveOptions(tol=1e-14, max_iter=1), cons)
    assert res.termination == Termination.MAX_ITER
    assert res.iterations == 1


def test_non_finite_objective_raises():
    def bad(x, order=2):
        return ObjectiveJet(np.nan, np.full(5, np.nan), np.eye(5))

    with pytest.raises(SolverError):
        minimize(bad, np.array([0.3, 0.4, 0.6, 0.7, 0.1]), SolveOptions(), OPEN)


def test_pd_repair():
    H = np.diag([1.0, -2.0, 3.0])
    lam = pd_shift(H)
    assert np.linalg.eigvalsh(H + lam * np.eye(3)).min() > 0
    assert pd_shift(np.eye(3)) == 0.0
    g = np.array([1.0, 1.0, 1.0])
    d = shifted_solve(H, g, lam)
    assert_allclose((H + lam * np.eye(3)) @ d, g, atol=1e-12)


@pytest.mark.parametrize("kw", [dict(tol=0.0), dict(max_iter=0), dict(hessian_mode="bfgs"), dict(lbfgs_history=0),
                                dict(length_mode="penalty"), dict(max_step=0.0)])
def test_options_validation(kw):
    with pytest.raises(ValueError):
        SolveOptions(**kw)
