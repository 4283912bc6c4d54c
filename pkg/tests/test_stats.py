import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special
from scipy import stats as sps

from meshsla.errors import EmptySamples, InsufficientSamples
from meshsla.stats import (
    A_LESS_THAN_B,
    FAIL_TO_REJECT,
    REJECT,
    betainc,
    empirical_quantile,
    quantiles,
    student_t_cdf,
    welch_t_test,
)


def sort_oracle(x, p):
    s = sorted(x)
    return s[max(1, math.ceil(p * len(s) / 100 - 1e-9)) - 1]


def test_nearest_rank_examples():
    assert empirical_quantile(list(range(1, 101)), 99) == 99
    assert empirical_quantile([5], 50) == 5
    assert empirical_quantile([3, 1, 2], 66.7) == 3 == sort_oracle([3, 1, 2], 66.7)


def test_quantile_rejects_empty_and_bad_percentile():
    with pytest.raises(EmptySamples):
        empirical_quantile([], 50)
    with pytest.raises(ValueError):
        empirical_quantile([1.0], 0)


def test_float_roundoff_does_not_bump_rank():
    # 99.9 * 1000 / 100 is 998.9999999999999 in binary floating point
    x = np.arange(1, 1001)
    assert empirical_quantile(x, 99.9) == 999
    assert empirical_quantile(x, 99.5) == 995


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60),
       st.floats(0.1, 100.0))
def test_quantile_matches_sort_oracle(x, p):
    q = empirical_quantile(x, p)
    assert q == sort_oracle(x, p)
    assert q in x


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40))
def test_quantiles_monotone_in_p(x):
    grid = (50, 90, 95, 99, 99.5, 99.9)
    q = quantiles(x, grid)
    assert np.all(np.diff(q) >= 0)
    assert list(q) == [empirical_quantile(x, p) for p in grid]


def test_identical_windows_fail_to_reject():
    a = [1.0, 2.0, 3.0, 4.0]
    r = welch_t_test(a, list(a))
    assert r.t_statistic == 0 and r.decision == FAIL_TO_REJECT


def test_zero_variance_equal_means():
    r = welch_t_test([2.0, 2.0, 2.0], [2.0, 2.0])
    assert r.t_statistic == 0 and r.decision == FAIL_TO_REJECT and r.p_value == 1.0


def test_needs_two_samples():
    with pytest.raises(InsufficientSamples):
        welch_t_test([1.0], [1.0, 2.0])


def test_separated_normals_reject_and_match_scipy():
    rng = np.random.default_rng(3)
    a, b = rng.normal(0, 1, 1000), rng.normal(5, 1, 1000)
    r = welch_t_test(a, b, 0.05)
    ref = sps.ttest_ind(a, b, equal_var=False)
    assert r.decision == REJECT
    assert r.t_statistic == pytest.approx(ref.statistic, rel=1e-10)
    assert r.p_value == pytest.approx(ref.pvalue, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_matches_scipy_on_random_windows(seed):
    rng = np.random.default_rng(seed)
    a = rng.gamma(2.0, 3.0, rng.integers(2, 40))
    b = rng.gamma(2.5, 2.0, rng.integers(2, 40)) + rng.normal(0, 1)
    r = welch_t_test(a, b)
    ref = sps.ttest_ind(a, b, equal_var=False)
    assert r.t_statistic == pytest.approx(ref.statistic, rel=1e-9)
    assert r.p_value == pytest.approx(ref.pvalue, rel=1e-7, abs=1e-12)
    one = welch_t_test(a, b, alternative=A_LESS_THAN_B)
    ref1 = sps.ttest_ind(a, b, equal_var=False, alternative="less")
    assert one.p_value == pytest.approx(ref1.pvalue, rel=1e-7, abs=1e-12)


def test_false_rejection_rate_near_alpha():
    keep = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        keep += welch_t_test(rng.normal(0, 1, 100), rng.normal(0, 1, 100), 0.05).decision == FAIL_TO_REJECT
    assert 930 <= keep <= 970


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=20),
       st.lists(st.floats(-100, 100), min_size=2, max_size=20))
def test_two_sided_swap_symmetry(a, b):
    r1, r2 = welch_t_test(a, b), welch_t_test(b, a)
    assert r1.p_value == pytest.approx(r2.p_value, abs=1e-12)
    if math.isfinite(r1.t_statistic):
        assert r1.t_statistic == pytest.approx(-r2.t_statistic, abs=1e-12)


def test_t_cdf_tends_to_normal():
    x = np.linspace(-5, 5, 101)
    err = max(abs(student_t_cdf(v, 1e6) - sps.norm.cdf(v)) for v in x)
    assert err < 1e-4


@pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (2.0, 3.0, 0.9), (50.0, 0.5, 0.99),
                                   (0.5, 500.0, 1e-4), (10.0, 10.0, 0.5)])
def test_betainc_matches_scipy(a, b, x):
    assert betainc(a, b, x) == pytest.approx(special.betainc(a, b, x), abs=1e-8)


@pytest.mark.parametrize("dof", [1.0, 2.5, 7.0, 30.0, 1e3])
def test_t_cdf_matches_scipy(dof):
    for t in (-8.0, -1.3, 0.0, 0.7, 4.0):
        assert student_t_cdf(t, dof) == pytest.approx(sps.t.cdf(t, dof), abs=1e-8)
