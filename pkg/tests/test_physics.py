import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from cellspan.dataset import CapacityLossSeries, capacity_loss_series
from cellspan.errors import DataError, NumericalError
from cellspan.physics import (
    PhysicsParams,
    cycle_life,
    fit_cell,
    fit_params,
    initial_loss_C,
    q_loss,
    residuals,
)

from .test_dataset import _cell


def _series(A, B, C, n=600, noise=0.0, seed=0):
    x = np.arange(1, n + 1)
    y = np.exp(A + B * np.log(x)) + C
    if noise:
        y = y + np.random.default_rng(seed).normal(0, noise, n)
    return CapacityLossSeries(x, y)


def test_q_loss_basic_values():
    assert q_loss(PhysicsParams(-3.0, 1.7, 0.04), 0) == 0.04
    assert q_loss(PhysicsParams(0.0, 1.0, 0.0), 0.2) == pytest.approx(0.2)
    np.testing.assert_allclose(q_loss(PhysicsParams(0.0, 2.0), np.array([1.0, 3.0])), [1.0, 9.0])


def test_q_loss_high_precision_oracle():
    mpmath.mp.dps = 50
    want = mpmath.e ** mpmath.mpf(-8) * mpmath.mpf(500) ** mpmath.mpf("0.9") + mpmath.mpf("0.01")
    got = q_loss(PhysicsParams(-8.0, 0.9, 0.01), 500)
    assert abs(got - float(want)) <= 1e-15 * float(want)


def test_cycle_life_identity_and_errors():
    assert cycle_life(PhysicsParams(0.0, 1.0, 0.0), 0.2) == pytest.approx(0.2)
    with pytest.raises(DataError, match="initial loss"):
        cycle_life(PhysicsParams(-10, 2, 0.25), 0.2)
    with pytest.raises(DataError):
        cycle_life(PhysicsParams(-10, 2, 0.0), 1.0)
    with pytest.raises(NumericalError):
        cycle_life(PhysicsParams(-700, 1e-3, 0.0), 0.2)


@pytest.mark.parametrize("kw", [{"B": 0.0}, {"B": -1.0}, {"C": -0.1}, {"A": math.inf}, {"A": 710.0}])
def test_params_validation(kw):
    base = {"A": -10.0, "B": 2.0, "C": 0.01} | kw
    with pytest.raises(DataError):
        PhysicsParams(**base)


@pytest.mark.parametrize("qd, C", [(1.078, 0.02), (1.1, 0.0), (1.12, 0.0)])
def test_initial_loss_C(qd, C):
    cell = _cell(qd=np.r_[qd, np.full(119, 1.0)])
    assert initial_loss_C(cell) == pytest.approx(C, abs=1e-12)


def test_residual_jacobian_matches_finite_differences(rng):
    x = np.arange(1, 200, dtype=float)
    y = 0.01 + 1e-5 * x**1.8
    for _ in range(20):
        theta = np.array([rng.uniform(-14, -6), rng.uniform(0.5, 2.5)])
        _, J = residuals(theta, x, y, 0.01)
        h = 1e-6
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd = (residuals(theta + e, x, y, 0.01)[0] - residuals(theta - e, x, y, 0.01)[0]) / (2 * h)
            scale = np.maximum(np.abs(J[:, k]), 1e-300)
            assert np.max(np.abs(fd - J[:, k]) / scale) < 1e-5


def test_noiseless_recovery():
    rep = fit_params(_series(-11.3, 1.85, 0.015), 0.015)
    assert rep.converged
    assert abs(rep.params.A + 11.3) < 1e-6 and abs(rep.params.B - 1.85) < 1e-6
    assert rep.r_squared == pytest.approx(1.0, abs=1e-12)


def test_objective_trace_non_increasing():
    rep = fit_params(_series(-12.0, 1.9, 0.01, noise=0.003, seed=4), 0.01)
    tr = np.array(rep.objective_trace)
    assert len(tr) > 1 and np.all(np.diff(tr) <= 0)
    assert rep.converged


def test_constant_loss_is_an_error():
    with pytest.raises(DataError, match="above C"):
        fit_params(CapacityLossSeries(np.arange(1, 51), np.full(50, 0.02)), 0.02)


def test_fit_cell_uses_first_cycle_C(noiseless_synth):
    cells, truth = noiseless_synth
    rep = fit_cell(cells[0])
    t = truth[cells[0].cell_id]
    assert rep.params.C == pytest.approx(initial_loss_C(cells[0]))
    # first-cycle loss is exp(A) + C, which is a tiny offset on C
    assert abs(rep.params.C - t["C"]) < 1e-5
    assert len(capacity_loss_series(cells[0]).loss) == len(cells[0].summaries)


valid_params = st.tuples(
    st.floats(-20.0, -2.0), st.floats(0.2, 4.0), st.floats(0.0, 0.15), st.floats(0.16, 0.6)
)


@settings(max_examples=300, deadline=None)
@given(valid_params)
def test_inverse_round_trip(p):
    A, B, C, t = p
    params = PhysicsParams(A, B, C)
    life = cycle_life(params, t)
    assume(life < 1e300)
    assert q_loss(params, life) == pytest.approx(t, rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(valid_params, st.floats(0.01, 0.3))
def test_monotonicity(p, dt):
    A, B, C, t = p
    params = PhysicsParams(A, B, C)
    assert q_loss(params, 101.0) > q_loss(params, 100.0)
    t2 = min(t + dt, 0.99)
    assume(t2 > t)
    assert cycle_life(params, t2) > cycle_life(params, t)
