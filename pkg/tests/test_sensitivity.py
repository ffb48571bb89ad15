import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from tlroadmap.sensitivity import DEFAULT_POINTS, causal_gap_curve, default_grid

PSI, SE, CI = 0.21, 0.062, (0.09, 0.33)


class TestWorkedExamples:
    def test_thresholds_of_the_ritodrine_result(self):
        curve = causal_gap_curve(PSI, SE, CI)
        assert curve.threshold_significance_pos == pytest.approx(0.09, abs=1e-12)
        assert curve.threshold_sign_reversal_pos == pytest.approx(0.33, abs=1e-12)
        assert curve.threshold_significance_neg is None
        assert curve.threshold_sign_reversal_neg is None

    def test_one_se_shift(self):
        (row,) = causal_gap_curve(PSI, SE, CI, grid=[0.062]).rows
        assert row.estimate == pytest.approx(0.148, abs=1e-12)
        assert row.delta_se_units == pytest.approx(1.0, abs=1e-12)
        assert (row.lower, row.upper) == pytest.approx((0.028, 0.268), abs=1e-12)

    def test_zero_gap_is_the_unshifted_result(self):
        (row,) = causal_gap_curve(PSI, SE, CI, grid=[0.0]).rows
        assert (row.delta, row.delta_se_units, row.estimate, row.lower, row.upper) == (0.0, 0.0, PSI, 0.09, 0.33)

    def test_default_grid(self):
        grid = causal_gap_curve(PSI, SE, CI).delta_grid
        assert grid.size == DEFAULT_POINTS
        assert grid[0] == pytest.approx(-0.42) and grid[-1] == pytest.approx(0.42)
        assert 0.0 in grid
        assert grid.max() > 0.325
        assert np.all(np.diff(grid) > 0)

    def test_default_grid_for_null_estimate_uses_se(self):
        grid = default_grid(0.0, 0.05)
        assert grid[-1] == pytest.approx(0.2)

    def test_rows_sorted_even_if_grid_is_not(self):
        curve = causal_gap_curve(PSI, SE, CI, grid=[0.3, -0.1, 0.0])
        assert curve.delta_grid.tolist() == [-0.1, 0.0, 0.3]

    def test_csv_columns(self):
        rows = causal_gap_curve(PSI, SE, CI, grid=[0.0]).to_rows()
        assert list(rows[0]) == ["delta", "delta_se_units", "estimate", "lower", "upper"]

    def test_insignificant_estimate_has_only_reversal_threshold(self):
        curve = causal_gap_curve(0.05, 0.04, (-0.03, 0.13))
        assert curve.threshold_significance_pos is None
        assert curve.threshold_sign_reversal_pos == pytest.approx(0.13)


class TestErrors:
    def test_empty_grid(self):
        with pytest.raises(ValueError, match="empty"):
            causal_gap_curve(PSI, SE, CI, grid=[])

    @pytest.mark.parametrize("se", [0.0, -0.1, float("nan")])
    def test_non_positive_se(self, se):
        with pytest.raises(ValueError, match="standard error"):
            causal_gap_curve(PSI, se, CI)

    def test_interval_must_contain_estimate(self):
        with pytest.raises(ValueError, match="contain"):
            causal_gap_curve(0.5, SE, CI)


finite = st.floats(-1, 1, allow_nan=False)


@st.composite
def results(draw):
    psi = draw(finite)
    se = draw(st.floats(1e-3, 0.5))
    half = 1.96 * se
    return psi, se, (psi - half, psi + half)


class TestProperties:
    @settings(max_examples=100, deadline=None)
    @given(results(), finite, finite)
    def test_shift_linearity(self, res, d1, d2):
        psi, se, ci = res
        (r1,) = causal_gap_curve(psi, se, ci, grid=[d1]).rows
        (r12,) = causal_gap_curve(psi, se, ci, grid=[d1 + d2]).rows
        (again,) = causal_gap_curve(r1.estimate, se, (r1.lower, r1.upper), grid=[d2]).rows
        for a, b in [(r12.estimate, again.estimate), (r12.lower, again.lower), (r12.upper, again.upper)]:
            assert a == pytest.approx(b, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(results(), st.lists(finite, min_size=1, max_size=30))
    def test_width_preserved_and_estimate_exact(self, res, grid):
        psi, se, ci = res
        curve = causal_gap_curve(psi, se, ci, grid=grid)
        width = ci[1] - ci[0]
        for row in curve.rows:
            assert row.upper - row.lower == pytest.approx(width, abs=1e-12)
            assert row.estimate == psi - row.delta
            assert row.delta_se_units == row.delta / se

    @settings(max_examples=100, deadline=None)
    @given(results(), st.integers(5, 81))
    def test_threshold_consistency_on_grid(self, res, points):
        psi, se, ci = res
        assume(ci[0] > 0)
        curve = causal_gap_curve(psi, se, ci, grid=default_grid(psi, se, points))
        t = curve.threshold_significance_pos
        (at,) = causal_gap_curve(psi, se, ci, grid=[t]).rows
        assert at.lower <= 1e-15
        below = [r for r in curve.rows if r.delta < t]
        if below:
            assert below[-1].lower > 0
        past = [r for r in curve.rows if r.delta > curve.threshold_sign_reversal_pos]
        assert all(r.upper < 0 for r in past)

    @settings(max_examples=100, deadline=None)
    @given(results())
    def test_negative_estimate_mirrors_positive(self, res):
        psi, se, ci = res
        assume(psi != 0)
        pos = causal_gap_curve(abs(psi), se, (abs(psi) - 1.96 * se, abs(psi) + 1.96 * se))
        neg = causal_gap_curve(-abs(psi), se, (-abs(psi) - 1.96 * se, -abs(psi) + 1.96 * se))
        mirror = lambda x: None if x is None else -x  # noqa: E731
        assert mirror(neg.threshold_significance_neg) == pytest.approx(pos.threshold_significance_pos)
        assert mirror(neg.threshold_sign_reversal_neg) == pytest.approx(pos.threshold_sign_reversal_pos)
        assert neg.threshold_significance_pos is None and neg.threshold_sign_reversal_pos is None


def test_describe_names_only_existing_thresholds():
    text = causal_gap_curve(PSI, SE, CI).describe()
    assert len(text) == 2
    assert "0.09" in text[0] and "0.33" in text[1]
    assert len(causal_gap_curve(0.05, 0.04, (-0.03, 0.13)).describe()) == 1
    assert "negative" not in " ".join(causal_gap_curve(-0.21, SE, (-0.33, -0.09)).describe())
