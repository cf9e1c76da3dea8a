import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from selbounds.bootstrap import (
    BootstrapFailure,
    EmptyDraws,
    bootstrap_ci,
    bootstrap_table,
    quantile,
    resample_indices,
)
from selbounds.core import Estimand, ObservationSet, SupportTable, WeightBox, collapse_support
from selbounds.lfp import solve_bounds, solve_bounds_bruteforce


def test_quantile_examples():
    assert quantile([1, 2, 3, 4, 5], 0.5) == 3
    assert quantile([5, 1, 4], 0.0) == 1 and quantile([5, 1, 4], 1.0) == 5
    assert quantile([10, 20], 0.25) == 12.5
    with pytest.raises(EmptyDraws):
        quantile([], 0.5)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(0, 1))
def test_quantile_matches_numpy_linear(xs, q):
    assert quantile(xs, q) == pytest.approx(np.quantile(xs, q, method="linear"), rel=1e-12, abs=1e-9)


@pytest.fixture
def sample(rng):
    y = np.round(rng.normal(size=300), 1)
    return ObservationSet.from_columns(y=y)


def test_same_seed_is_bit_identical(sample):
    box = WeightBox(0.2, 1.0)
    a = bootstrap_ci(sample, Estimand.mean("y"), box, R=200, seed=9)
    b = bootstrap_ci(sample, Estimand.mean("y"), box, R=200, seed=9)
    assert a.c_lo == b.c_lo and a.c_hi == b.c_hi
    np.testing.assert_array_equal(a.lo_draws, b.lo_draws)
    c = bootstrap_ci(sample, Estimand.mean("y"), box, R=200, seed=10)
    assert c.c_lo != a.c_lo


def test_endpoints_are_draw_quantiles(sample):
    ci = bootstrap_ci(sample, Estimand.mean("y"), WeightBox(0.2, 1.0), R=300, alpha=0.1, seed=1)
    assert ci.c_lo == quantile(ci.lo_draws, 0.05)
    assert ci.c_hi == quantile(ci.hi_draws, 0.95)
    assert ci.lo_draws.shape == (300,)


def test_draws_match_recollapsed_resamples(sample):
    # solving on resampled counts equals collapsing the resampled rows from scratch
    est, box = Estimand.mean("y"), WeightBox(0.2, 1.0)
    ci = bootstrap_ci(sample, est, box, R=100, seed=3)
    for r in range(0, 100, 7):
        rows = sample.take(resample_indices(sample.n, 3, r))
        ie = solve_bounds(collapse_support(rows, est), box)
        assert ci.lo_draws[r] == pytest.approx(ie.beta_lo, abs=1e-12)
        assert ci.hi_draws[r] == pytest.approx(ie.beta_hi, abs=1e-12)


def test_each_resample_agrees_with_enumeration(rng):
    obs = ObservationSet.from_columns(y=rng.integers(0, 8, 200).astype(float))
    est, box = Estimand.mean("y"), WeightBox(0.3, 0.8)
    ci = bootstrap_ci(obs, est, box, R=100, seed=4)
    for r in (0, 50, 99):
        t = collapse_support(obs.take(resample_indices(obs.n, 4, r)), est)
        bf = solve_bounds_bruteforce(t, box)
        assert ci.lo_draws[r] == pytest.approx(bf.beta_lo, abs=1e-10)
        assert ci.hi_draws[r] == pytest.approx(bf.beta_hi, abs=1e-10)


def test_degenerate_box_is_ordinary_bootstrap(sample):
    ci = bootstrap_ci(sample, Estimand.mean("y"), WeightBox(0.5, 0.5), R=200, seed=2)
    np.testing.assert_allclose(ci.lo_draws, ci.hi_draws, rtol=0, atol=1e-12)
    y = sample.column("y")
    means = [y[resample_indices(sample.n, 2, r)].mean() for r in range(200)]
    np.testing.assert_allclose(ci.lo_draws, means, rtol=0, atol=1e-12)


def test_contains_unweighted_estimate(sample):
    ci = bootstrap_ci(sample, Estimand.mean("y"), WeightBox(0.2, 1.0), R=200, seed=5)
    assert ci.contains(sample.column("y").mean())


def test_requires_enough_resamples(sample):
    with pytest.raises(ValueError):
        bootstrap_ci(sample, Estimand.mean("y"), WeightBox(0.2, 1.0), R=50)


def test_weak_instrument_aborts():
    # g of mixed sign and nearly balanced: many resamples have a denominator crossing zero
    t = SupportTable.from_arrays([1.0, 1.0, 0.5], [1.0, -1.0, 0.3], count=[20, 19, 3])
    with pytest.raises(BootstrapFailure, match="weak instrument"):
        bootstrap_table(t, WeightBox.from_weights(1.0, 1.5), R=200, seed=0)


def test_rare_failures_are_redrawn():
    # the full-sample denominator is safely positive; a few resamples are not
    t = SupportTable.from_arrays([1.0, 1.0], [1.0, -1.0], count=[92, 8])
    ci = bootstrap_table(t, WeightBox.from_weights(1.0, 5.0), R=1000, seed=0)
    assert 0 < ci.redraws <= 10
    assert np.all(np.isfinite(ci.lo_draws)) and np.all(np.isfinite(ci.hi_draws))
