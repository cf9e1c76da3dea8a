import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from selbounds.core import Estimand, ObservationSet, SupportTable, WeightBox, collapse_support, evaluate
from selbounds.inference import (
    confidence_interval,
    p_value,
    p_value_from_se,
    sigma_hat,
    z_upper,
)
from selbounds.lfp import solve_bounds


def test_sigma_hat_hand_example():
    t = SupportTable.from_arrays([0.0, 1.0], [1.0, 1.0], [0.5, 0.5])
    assert sigma_hat(t, [1.0, 1.0], beta_w=0.5) == pytest.approx(0.25, abs=1e-15)


def test_sigma_hat_unit_weights_is_population_variance(rng):
    y = rng.integers(0, 6, 300).astype(float)
    t = collapse_support(ObservationSet.from_columns(y=y), Estimand.mean("y"))
    assert sigma_hat(t, np.ones(t.K)) == pytest.approx(np.var(y), rel=1e-12)


def test_single_cell_has_no_spread():
    t = SupportTable.from_arrays([2.0], [1.0], count=[50])
    assert sigma_hat(t, [3.0]) == 0.0
    ie = solve_bounds(t, WeightBox(0.2, 0.9))
    ci = confidence_interval(ie, t, alpha=0.01)
    assert ci.c_lo == ci.c_hi == 2.0


def test_sigma_hat_matches_resampling_variance(rng):
    # delta-method variance vs Monte-Carlo variance of the fixed-weight ratio, n = 5000
    n, K = 5000, 8
    vals = np.linspace(-1.0, 2.0, K)
    p = rng.dirichlet(np.ones(K) * 3)
    w = rng.uniform(1.0, 4.0, K)
    counts = rng.multinomial(n, p)
    t = SupportTable.from_arrays(vals, np.ones(K), count=counts)
    draws = rng.multinomial(n, counts / n, size=4000)
    ratios = (draws @ (w * vals)) / (draws @ w)
    mc = ratios.var(ddof=1) * n
    assert sigma_hat(t, w) == pytest.approx(mc, rel=0.15)


def test_ci_endpoints_and_nesting(rng):
    y = rng.normal(size=400)
    t = collapse_support(ObservationSet.from_columns(y=np.round(y, 2)), Estimand.mean("y"))
    ie = solve_bounds(t, WeightBox(0.2, 1.0))
    ci = confidence_interval(ie, t, alpha=0.05)
    se_hi = math.sqrt(sigma_hat(t, ie.w_hi) / t.n)
    assert ci.c_hi == pytest.approx(ie.beta_hi + norm.isf(0.025) * se_hi, rel=1e-14)
    assert ci.c_lo <= ie.beta_lo and ci.c_hi >= ie.beta_hi
    wide = confidence_interval(ie, t, alpha=0.01)
    assert wide.c_lo <= ci.c_lo and wide.c_hi >= ci.c_hi
    nearly_one = confidence_interval(ie, t, alpha=1 - 1e-12)
    assert nearly_one.c_hi - ie.beta_hi < 1e-9 and ie.beta_lo - nearly_one.c_lo < 1e-9
    with pytest.raises(ValueError):
        confidence_interval(ie, t, alpha=1.0)


def test_z_upper():
    assert z_upper(0.025) == pytest.approx(1.959963984540054, abs=1e-12)
    assert z_upper(0.5) == pytest.approx(0.0, abs=1e-15)


def test_p_value_shape():
    assert p_value_from_se(-1.0, 1.0, 0.01, 0.01, 0.0) == pytest.approx(1.0)
    assert p_value_from_se(-1.0, 1.0, 0.01, 0.01, 1.0) == pytest.approx(0.5)
    assert p_value_from_se(-1.0, 1.0, 0.01, 0.01, 5.0) == pytest.approx(0.0)
    # zero standard errors make each term a step
    assert p_value_from_se(-1.0, 1.0, 0.0, 0.0, 0.3) == 1.0
    assert p_value_from_se(-1.0, 1.0, 0.0, 0.0, 1.0) == 1.0
    assert p_value_from_se(-1.0, 1.0, 0.0, 0.0, 1.5) == 0.0
    assert p_value_from_se(-1.0, 1.0, 0.0, 0.0, -1.5) == 0.0


@given(st.floats(-3, 3), st.floats(0, 3), st.floats(0.01, 1), st.floats(0.01, 1))
def test_p_value_is_unimodal_and_bounded(lo, width, se_lo, se_hi):
    hi = lo + width
    grid = np.linspace(lo - 5, hi + 5, 201)
    p = np.array([p_value_from_se(lo, hi, se_lo, se_hi, b) for b in grid])
    assert np.all((p >= 0) & (p <= 1))
    peak = int(np.argmax(p))
    assert np.all(np.diff(p[: peak + 1]) >= -1e-12)
    assert np.all(np.diff(p[peak:]) <= 1e-12)


def test_p_value_and_interval_duality(rng):
    y = rng.normal(size=300)
    t = collapse_support(ObservationSet.from_columns(y=np.round(y, 1)), Estimand.mean("y"))
    ie = solve_bounds(t, WeightBox(0.25, 1.0))
    alpha = 0.05
    # the two-sided interval at level 2 alpha has one-sided tails alpha; at its ends the
    # p-value equals alpha less the (negligible) opposite tail
    ci = confidence_interval(ie, t, alpha=2 * alpha)
    tail_hi = norm.cdf((ie.beta_lo - ci.c_hi) / ci.se_lo)
    tail_lo = 1 - norm.cdf((ie.beta_hi - ci.c_lo) / ci.se_hi)
    assert p_value(ie, t, None, ci.c_hi) == pytest.approx(alpha - tail_hi, abs=1e-9)
    assert p_value(ie, t, None, ci.c_lo) == pytest.approx(alpha - tail_lo, abs=1e-9)
    for b in np.linspace(ci.c_lo - 1, ci.c_hi + 1, 400):
        if p_value(ie, t, None, b) >= alpha:
            assert ci.c_lo <= b <= ci.c_hi


def test_unweighted_estimate_sits_inside(rng):
    y = rng.exponential(size=200).round(1)
    t = collapse_support(ObservationSet.from_columns(y=y), Estimand.mean("y"))
    ie = solve_bounds(t, WeightBox(0.5, 1.0))
    ci = confidence_interval(ie, t)
    assert ci.contains(evaluate(t, np.ones(t.K)))
