import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import AGE_COUNTS, AGE_RECODE, COHORT_SPECS, cohort_rows
from tlroadmap.data_model import DataError, dichotomize_treatment, load_dataset, recode_categories
from tlroadmap.diagnostics import (
    BIN_EDGES,
    c_statistic,
    crude_dose_table,
    overlap_summary,
    positivity_table,
    ps_bins,
)


def brute_force_c(g, A):
    """Pairwise concordance over all treated/control pairs, ties as one half."""
    treated = [x for x, a in zip(g, A) if a == 1]
    control = [x for x, a in zip(g, A) if a == 0]
    score = 0.0
    for t in treated:
        for c in control:
            score += 1.0 if t > c else 0.5 if t == c else 0.0
    return score / (len(treated) * len(control))


@pytest.fixture
def cohort(cohort_csv):
    return dichotomize_treatment(load_dataset(cohort_csv, COHORT_SPECS), "dose")


class TestCStatistic:
    def test_matches_brute_force_on_200_instances(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            n = int(rng.integers(2, 60))
            A = (rng.random(n) < 0.4).astype(float)
            A[0], A[1] = 0.0, 1.0
            # coarse grid forces many ties
            g = np.round(rng.random(n), int(rng.integers(1, 3)))
            assert c_statistic(g, A) == pytest.approx(brute_force_c(g, A), abs=1e-12)

    @pytest.mark.parametrize(
        "g, A, expected",
        [
            ([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1], 1.0),
            ([0.4, 0.4, 0.4, 0.4], [0, 1, 0, 1], 0.5),
            ([0.2, 0.6, 0.4, 0.8], [0, 1, 1, 0], 0.5),
            ([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1], 0.0),
        ],
    )
    def test_worked_examples(self, g, A, expected):
        assert c_statistic(g, A) == pytest.approx(expected, abs=1e-15)

    def test_one_arm_raises(self):
        with pytest.raises(ValueError):
            c_statistic([0.2, 0.3], [1, 1])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1000), st.booleans()), min_size=2, max_size=40))
    def test_complement_and_monotone_invariance(self, pairs):
        # scores on a 1e-3 grid so the transform below stays strictly increasing in floats
        g = np.array([p[0] / 1000 for p in pairs])
        A = np.array([float(p[1]) for p in pairs])
        if A.min() == A.max():
            A[0] = 1 - A[0]
        c = c_statistic(g, A)
        assert 0 <= c <= 1
        assert c + c_statistic(g, 1 - A) == pytest.approx(1.0, abs=1e-12)
        assert c_statistic(np.exp(3 * g) - 7, A) == pytest.approx(c, abs=1e-12)


class TestPositivity:
    def test_age_group_counts_and_zero_cells(self, cohort):
        table = positivity_table(cohort, "age_group")
        got = {c.level: (c.n_control, c.n_treated) for c in table.cells}
        assert got == AGE_COUNTS
        assert set(table.zero_cells) == {"16-20", "46-50"}
        assert table.n == 225
        assert sum(c.n_treated for c in table.cells) == 82

    def test_recoded_table_has_no_zero_cells(self, cohort):
        table = positivity_table(recode_categories(cohort, "age_group", AGE_RECODE), "age_group")
        got = {c.level: (c.n_control, c.n_treated) for c in table.cells}
        assert got == {"16-30": (48, 33), "31-35": (50, 29), "36-50": (45, 20)}
        assert table.zero_cells == ()

    def test_single_level_stratifier(self, cohort):
        one = recode_categories(cohort, "age_group", {k: "all" for k in AGE_COUNTS})
        table = positivity_table(one, "age_group")
        assert [(c.level, c.n_control, c.n_treated) for c in table.cells] == [("all", 143, 82)]
        assert table.zero_cells == ()

    def test_blind_to_the_outcome(self, cohort):
        frame = cohort.frame.copy()
        frame[cohort.outcome] = np.nan
        blinded = positivity_table(cohort.with_frame(frame), "age_group")
        assert blinded == positivity_table(cohort, "age_group")

    def test_non_categorical_stratifier_rejected(self, cohort):
        with pytest.raises(DataError, match="categorical"):
            positivity_table(cohort, "bmi")

    def test_to_rows(self, cohort):
        rows = positivity_table(cohort, "age_group").to_rows()
        assert len(rows) == 7
        assert next(r for r in rows if r["level"] == "16-20") == {"stratifier": "age_group", "level": "16-20", "n_control": 2, "n_treated": 0}


class TestOverlap:
    def test_constant_score_lands_in_one_bin(self):
        A = np.r_[np.zeros(143), np.ones(82)]
        summary = overlap_summary(np.full(225, 0.36), A)
        k = int(np.flatnonzero(summary.control_counts)[0])
        assert (BIN_EDGES[k], BIN_EDGES[k + 1]) == pytest.approx((0.35, 0.40))
        assert summary.control_counts[k] == 143 and summary.treated_counts[k] == 82
        assert summary.c_statistic == 0.5
        assert summary.control_range == summary.treated_range == (0.36, 0.36)

    def test_grid_of_midpoints_fills_each_bin_once(self):
        g = np.arange(0.025, 1.0, 0.05)
        summary = overlap_summary(g, np.tile([0.0, 1.0], 10))
        np.testing.assert_array_equal(summary.control_counts + summary.treated_counts, np.ones(20))

    @pytest.mark.parametrize("g, k", [(0.0, 0), (0.05, 0), (0.0500001, 1), (0.95, 18), (1.0, 19)])
    def test_bin_boundaries_right_closed(self, g, k):
        assert ps_bins([g])[0] == k

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=80))
    def test_counts_sum_to_arm_sizes(self, pairs):
        g = np.array([p[0] for p in pairs])
        A = np.array([float(p[1]) for p in pairs])
        s = overlap_summary(g, A)
        assert s.control_counts.sum() == np.sum(A == 0)
        assert s.treated_counts.sum() == np.sum(A == 1)
        if A.min() == A.max():
            assert math.isnan(s.c_statistic)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            overlap_summary([0.5, 1.2], [0, 1])

    def test_to_dict_shape(self):
        d = overlap_summary([0.2, 0.7], [0, 1]).to_dict()
        assert d["c_statistic"] == 1.0 and len(d["bins"]) == 20


class TestCrudeDose:
    def test_matches_hand_tally(self, cohort_csv):
        ds = load_dataset(cohort_csv, COHORT_SPECS)
        rows = cohort_rows()
        bins = crude_dose_table(ds, "dose")
        assert [b.label for b in bins] == ["0", "(0, 10]", "(10, 20]", "(20, 30]", "(30, 40]", "(40, 50]", "> 50"]

        def tally(pred):
            sel = [r for r in rows if pred(r["dose"])]
            return len(sel), sum(r["edema"] for r in sel)

        expected = [
            tally(lambda d: d == 0),
            tally(lambda d: 0 < d <= 10),
            tally(lambda d: 10 < d <= 20),
            tally(lambda d: 20 < d <= 30),
            tally(lambda d: 30 < d <= 40),
            tally(lambda d: 40 < d <= 50),
            tally(lambda d: d > 50),
        ]
        assert [(b.n, b.events) for b in bins] == expected
        assert bins[0].n == 143
        assert bins[3].n == 0 and bins[3].proportion is None
        assert bins[0].proportion == pytest.approx(expected[0][1] / 143)

    def test_edges_must_ascend(self, cohort_csv):
        ds = load_dataset(cohort_csv, COHORT_SPECS)
        with pytest.raises(ValueError):
            crude_dose_table(ds, "dose", edges=(0, 20, 10))
