import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from selbounds.core import (
    ContinuousSupportWarning,
    EmptyInput,
    Estimand,
    EstimandKind,
    NonFiniteEvaluation,
    ObservationSet,
    SupportTable,
    WeightBox,
    ZeroDenominator,
    collapse_support,
    denominator_range,
    evaluate,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_collapse_counts_duplicates():
    t = collapse_support(ObservationSet.from_columns(y=[1, 2, 2, 3]), Estimand.mean("y"))
    assert t.K == 3
    np.testing.assert_array_equal(t.phat, [0.25, 0.5, 0.25])
    np.testing.assert_array_equal(t.f, [1, 2, 3])
    np.testing.assert_array_equal(t.g, [1, 1, 1])
    np.testing.assert_array_equal(t.count, [1, 2, 1])


def test_collapse_identical_rows_is_one_cell():
    t = collapse_support(ObservationSet.from_columns(y=[4.0] * 7), Estimand.mean("y"))
    assert t.K == 1 and t.phat[0] == 1.0 and t.n == 7


def test_continuous_rows_each_get_a_cell(rng):
    y = rng.normal(size=1000)
    with pytest.warns(ContinuousSupportWarning):
        t = collapse_support(ObservationSet.from_columns(y=y), Estimand.mean("y"))
    # oracle: dictionary keyed by exact bytes of each row
    keys = {}
    for v in y:
        keys[np.float64(v).tobytes()] = keys.get(np.float64(v).tobytes(), 0) + 1
    assert t.K == len(keys) == 1000
    np.testing.assert_allclose(t.phat, 0.001, rtol=0, atol=1e-15)


def test_negative_zero_is_the_same_cell():
    t = collapse_support(ObservationSet.from_columns(y=[0.0, -0.0, 1.0]), Estimand.mean("y"))
    assert t.K == 2


def test_multicolumn_cells_use_whole_rows():
    obs = ObservationSet.from_columns(x=[1, 1, 2, 2], y=[3, 3, 3, 4])
    t = collapse_support(obs, Estimand.ols("x", "y"))
    assert t.K == 3
    counts = {tuple(row): c for row, c in zip(t.t, t.count)}
    assert counts == {(1.0, 3.0): 2, (2.0, 3.0): 1, (2.0, 4.0): 1}
    np.testing.assert_array_equal(t.f, t.t[:, 0] * t.t[:, 1])
    np.testing.assert_array_equal(t.g, t.t[:, 0] ** 2)
    np.testing.assert_array_equal(t.t[t.inverse], obs.rows)


def test_estimand_kinds():
    cols = {"z": np.array([1.0, 2.0]), "x": np.array([3.0, 4.0]), "y": np.array([5.0, 6.0])}
    f, g = Estimand.iv().evaluate_rows(cols)
    np.testing.assert_array_equal(f, [5, 12])
    np.testing.assert_array_equal(g, [3, 8])
    f, g = Estimand.ols().evaluate_rows(cols)
    np.testing.assert_array_equal(f, [15, 24])
    np.testing.assert_array_equal(g, [9, 16])
    assert Estimand.mean().kind is EstimandKind.MEAN


def test_non_finite_evaluation_names_the_row():
    est = Estimand.custom(lambda c: 1.0 / c["y"], lambda c: np.ones_like(c["y"]), ("y",))
    with pytest.raises(NonFiniteEvaluation) as ei, np.errstate(divide="ignore"):
        collapse_support(ObservationSet.from_columns(y=[1.0, 2.0, 0.0, 3.0]), est)
    assert ei.value.row == 2


def test_observation_set_validation():
    with pytest.raises(EmptyInput):
        ObservationSet.from_columns(y=[1.0])
    with pytest.raises(ValueError, match="missing"):
        ObservationSet.from_columns(y=[1.0, np.nan])
    obs = ObservationSet.from_columns(y=[1.0, 2.0])
    with pytest.raises(ValueError):
        obs.rows[0, 0] = 5.0


@pytest.mark.parametrize("a,b", [(0.0, 0.5), (0.6, 0.5), (0.5, 1.2), (-0.1, 0.5)])
def test_weight_box_rejects_bad_parameters(a, b):
    with pytest.raises(ValueError):
        WeightBox(a, b)


def test_weight_box_endpoints():
    box = WeightBox(0.1, 1.0)
    assert box.lo == 1.0 and box.hi == pytest.approx(10.0)
    assert WeightBox.from_weights(2.0, 4.0).a == 0.25


def test_evaluate_worked_examples(worked_table):
    assert evaluate(worked_table, [1, 1, 2]) == 7.0
    t = SupportTable.from_arrays([1, 2, 3], [1, 1, 1])
    assert evaluate(t, [2, 1, 1]) == pytest.approx((2 + 2 + 3) / 4, abs=1e-15)


def test_evaluate_rejects_zero_denominator():
    t = SupportTable.from_arrays([1.0, 1.0], [1.0, -1.0])
    with pytest.raises(ZeroDenominator):
        evaluate(t, [1.0, 1.0])
    with pytest.raises(ValueError):
        evaluate(t, [1.0])


def test_denominator_range():
    t = SupportTable.from_arrays([0.0, 0.0], [1.0, -1.0])
    box = WeightBox.from_weights(1.0, 3.0)
    assert denominator_range(t, box) == pytest.approx((-1.0, 1.0))


@given(st.lists(finite, min_size=2, max_size=12), st.floats(1e-3, 1e3), st.integers(0, 2**31))
def test_ratio_scale_invariance(f, c, seed):
    rng = np.random.default_rng(seed)
    K = len(f)
    t = SupportTable.from_arrays(f, rng.uniform(0.5, 2.0, K), rng.dirichlet(np.ones(K)))
    w = rng.uniform(1.0, 5.0, K)
    a, b = evaluate(t, w), evaluate(t, c * w)
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


@given(st.lists(finite, min_size=2, max_size=40, unique=True))
def test_collapse_of_unique_rows_matches_row_formula(ys):
    y = np.array(ys)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ContinuousSupportWarning)
        t = collapse_support(ObservationSet.from_columns(y=y), Estimand.mean("y"))
    assert t.K == len(y)
    w_rows = 1.0 + np.abs(y) % 3.0
    w_cells = 1.0 + np.abs(t.t[:, 0]) % 3.0
    row_level = np.sum(w_rows * y) / np.sum(w_rows)
    assert abs(evaluate(t, w_cells) - row_level) <= 1e-12 * max(1.0, np.max(np.abs(y)))


@given(st.lists(finite, min_size=1, max_size=15), st.integers(0, 2**31))
def test_weighted_mean_stays_within_cell_values(f, seed):
    rng = np.random.default_rng(seed)
    K = len(f)
    t = SupportTable.from_arrays(f, np.ones(K), rng.dirichlet(np.ones(K)))
    v = evaluate(t, rng.uniform(1.0, 10.0, K))
    tol = 1e-12 * max(1.0, max(abs(x) for x in f))
    assert min(f) - tol <= v <= max(f) + tol


@given(st.lists(st.integers(-3, 3), min_size=2, max_size=60))
def test_support_table_invariants(vals):
    t = collapse_support(ObservationSet.from_columns(y=vals), Estimand.mean("y"))
    assert abs(t.phat.sum() - 1.0) <= 1e-12
    assert t.count.sum() == len(vals)
    assert len(np.unique(t.t[:, 0])) == t.K
