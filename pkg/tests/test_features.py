import csv
import io

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from oracles import scalar_stats
from theftnet.data import DAYS, ConsumptionRecord, generate_synthetic, impute_missing
from theftnet.features import (
    FEATURE_NAMES,
    N_FEATURES,
    extract_features,
    extract_window_stats,
    feature_matrix,
    feature_matrix_csv,
    lower_median,
    monthly_averages,
    monthly_stats,
)

def names_with(*fragments):
    return [i for i, n in enumerate(FEATURE_NAMES) if any(f in n for f in fragments)]


class TestSchema:
    def test_count_and_layout(self):
        assert N_FEATURES == 43 == len(set(FEATURE_NAMES))
        assert FEATURE_NAMES[0] == "last30_max" and FEATURE_NAMES[24] == "last365_median"
        assert FEATURE_NAMES[25] == "month01_mean" and FEATURE_NAMES[36] == "month12_mean"
        assert FEATURE_NAMES[37:] == tuple(f"monthly_{s}" for s in ("max", "min", "var", "median", "skew",
                                                                    "divergence"))

    def test_names_stable_across_calls(self):
        a = extract_features(np.arange(DAYS, dtype=float))
        b = extract_features(np.ones(DAYS))
        assert a.names == b.names == FEATURE_NAMES


class TestWindowStats:
    def test_constant(self):
        s = extract_window_stats(np.full(DAYS, 2.5)).reshape(5, 5)
        np.testing.assert_array_equal(s[:, [0, 1, 2, 4]], 2.5)
        np.testing.assert_array_equal(s[:, 3], 0.0)

    def test_ramp_full_year(self):
        s = extract_window_stats(np.arange(1, DAYS + 1, dtype=float)).reshape(5, 5)
        # closed forms for 1..365: max 365, min 1, mean (1 + 365) / 2, var (n^2 - 1) / 12, median 183
        assert s[4].tolist() == [365, 1, 183, (365**2 - 1) / 12, 183]
        # last 30 days are 336..365; lower middle of an even count is the 15th value
        assert s[0].tolist() == [365, 336, 350.5, (30**2 - 1) / 12, 350]

    def test_day_one_only_touches_the_full_year(self):
        x = np.random.default_rng(0).uniform(0, 5, DAYS)
        y = x.copy()
        y[0] += 100
        a, b = extract_window_stats(x).reshape(5, 5), extract_window_stats(y).reshape(5, 5)
        np.testing.assert_array_equal(a[:4], b[:4])
        assert not np.array_equal(a[4], b[4])

    def test_lower_median(self):
        assert lower_median([4, 1, 3, 2]) == 2
        assert lower_median([5, 1, 3]) == 3


class TestMonthly:
    def test_constant(self):
        np.testing.assert_array_equal(monthly_averages(np.full(DAYS, 7.0)), 7.0)

    def test_step_series(self):
        x = np.where(np.arange(DAYS) < 185, 1.0, 3.0)
        m = monthly_averages(x)
        # months start at day 5; block i spans days 5 + 30 i .. 34 + 30 i
        expected = [np.mean(x[5 + 30 * i:35 + 30 * i]) for i in range(12)]
        np.testing.assert_array_equal(m, expected)
        assert m[0] == 1.0 and m[-1] == 3.0 and np.all(np.diff(m) >= 0)

    def test_oldest_five_days_ignored(self):
        x = np.random.default_rng(1).uniform(0, 5, DAYS)
        y = x.copy()
        y[:5] = -50
        np.testing.assert_array_equal(monthly_averages(x), monthly_averages(y))

    @pytest.mark.parametrize("v", [3.0, 0.01, 1e6])
    def test_stats_all_equal(self, v):
        s = monthly_stats(np.full(12, v))
        assert s[[0, 1, 3]].tolist() == [v, v, v] and s[4] == 0.0 and s[5] == 0.0
        assert s[2] <= 1e-20 * max(1.0, v * v)

    def test_symmetric_values_have_zero_skew(self):
        m = np.array([1, 2, 3, 4, 5, 6, 6, 5, 4, 3, 2, 1], dtype=float) * 1.7
        assert abs(monthly_stats(m)[4]) < 1e-9

    def test_one_to_twelve_matches_scalar_oracle(self):
        m = np.arange(1, 13, dtype=float)
        np.testing.assert_allclose(monthly_stats(m), scalar_stats(m), rtol=1e-12, atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.01, 100), min_size=12, max_size=12))
    def test_random_months_match_scalar_oracle(self, m):
        assume(np.std(m) > 1e-6 * np.mean(m))  # skew is ill-conditioned for near-flat months
        np.testing.assert_allclose(monthly_stats(np.array(m)), scalar_stats(m), rtol=1e-9, atol=1e-9)

    def test_zero_mean_flags_divergence(self):
        flags = []
        s = monthly_stats(np.array([-1.0, 1.0] * 6), flags)
        assert s[5] == 0.0 and flags == ["divergence_zero_mean"]


class TestExtract:
    def test_constant_record(self):
        f = extract_features(np.full(DAYS, 4.0)).values
        assert f.shape == (43,) and np.all(np.isfinite(f))
        zero = names_with("_var", "_skew", "_divergence")
        np.testing.assert_array_equal(f[zero], 0.0)
        np.testing.assert_array_equal(np.delete(f, zero), 4.0)

    def test_last_day_perturbation(self):
        x = np.random.default_rng(2).uniform(1, 5, DAYS)
        y = x.copy()
        y[-1] += 10
        a, b = extract_features(x).values, extract_features(y).values
        changed = set(np.flatnonzero(a != b))
        # every window contains the last day: max, mean, var move for sure
        for w in (30, 60, 90, 180, 365):
            assert {FEATURE_NAMES.index(f"last{w}_{s}") for s in ("max", "mean", "var")} <= changed
        assert FEATURE_NAMES.index("month12_mean") in changed
        months_untouched = [FEATURE_NAMES.index(f"month{i:02d}_mean") for i in range(1, 12)]
        assert not changed & set(months_untouched)

    @pytest.mark.parametrize("lam", [0.5, 3.0])
    def test_scaling(self, lam):
        x = np.random.default_rng(3).uniform(1, 5, DAYS)
        a, b = extract_features(x).values, extract_features(lam * x).values
        for i, name in enumerate(FEATURE_NAMES):
            if name.endswith("_var"):
                assert b[i] == pytest.approx(lam**2 * a[i], rel=1e-12)
            elif name.endswith(("_skew", "_divergence")):
                assert b[i] == pytest.approx(a[i], rel=1e-9, abs=1e-12)
            else:
                assert b[i] == pytest.approx(lam * a[i], rel=1e-12)

    def test_rejects_unimputed_record(self):
        values = np.ones(DAYS)
        values[3] = np.nan
        r = ConsumptionRecord("u", 0, values, None)
        with pytest.raises(ValueError):
            extract_features(r)
        assert np.all(np.isfinite(extract_features(impute_missing(r)).values))


def test_every_feature_finite_on_synthetic_records():
    ds = generate_synthetic(10_000, 0.15, 0.02, seed=11)
    X = feature_matrix(np.stack([impute_missing(r).readings for r in ds.records]))
    assert X.shape == (10_000, 43) and np.all(np.isfinite(X))


def test_feature_csv():
    X = feature_matrix(np.random.default_rng(4).uniform(0, 5, (3, DAYS)))
    rows = list(csv.reader(io.StringIO(feature_matrix_csv(X, [0, 1, 0]))))
    assert rows[0] == [*FEATURE_NAMES, "label"]
    assert [r[-1] for r in rows[1:]] == ["0", "1", "0"]
    np.testing.assert_array_equal(np.array(rows[1][:-1], dtype=float), X[0])
