import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meds.errors import ContractError
from meds.theory import (
    GapAnalysis,
    TheoremReport,
    check_unimodal,
    enumerate_memories,
    expected_nn_distance_exact,
    expected_nn_distance_mc,
    gap,
    gap_first_order,
    integer_weight_argmax,
    random_separable_instance,
    remainder_upper_bound,
    spatial_proportion,
    verify_theorem,
    weight,
    weight_unimodal_peak,
)

LINE = np.array([0.0, 1.0, 3.0])
TWO = np.array([1.0, 3.0])  # distances {1, 3} from the origin
SEPARABLE_1D = np.array([0.0, 0.1, 0.2, 5.0])


def test_empty_ball_and_full_ball():
    assert spatial_proportion([0.5], LINE, 0.0) == 0.0
    assert spatial_proportion([0.5], LINE, 10.0) == 1.0


def test_spatial_proportion_counts_the_closed_ball():
    assert spatial_proportion([0.0], LINE, 2.0) == pytest.approx(2 / 3, abs=1e-15)
    assert spatial_proportion([0.0], LINE, 1.0) == pytest.approx(2 / 3, abs=1e-15)
    with pytest.raises(ContractError):
        spatial_proportion([0.0], LINE, -1.0)


def test_two_point_pool_expectations():
    assert expected_nn_distance_exact([0.0], TWO, 1) == 2.0
    assert expected_nn_distance_exact([0.0], TWO, 2) == 1.5
    for m in range(1, 8):
        assert expected_nn_distance_exact([0.0], TWO, m) == pytest.approx(1 - 0.5**m + 3 * 0.5**m, abs=1e-15)


def test_huge_memory_converges_to_the_minimum(rng):
    pool = rng.standard_normal((30, 3))
    q = rng.standard_normal(3)
    dmin = np.sqrt(((pool - q) ** 2).sum(axis=1)).min()
    assert abs(expected_nn_distance_exact(q, pool, 10**6) - dmin) < 1e-6


def test_query_on_a_pool_point_is_bounded(rng):
    pool = rng.standard_normal((12, 2))
    mean = np.sqrt(((pool - pool[3]) ** 2).sum(axis=1)).mean()
    # a single draw is the plain mean; every larger memory sits strictly below it
    assert expected_nn_distance_exact(pool[3], pool, 1) == pytest.approx(mean, abs=1e-12)
    for m in (2, 5, 50):
        e = expected_nn_distance_exact(pool[3], pool, m)
        assert 0 <= e < mean


def test_zero_memory_is_rejected():
    with pytest.raises(ContractError):
        expected_nn_distance_exact([0.0], TWO, 0)


def test_ties_are_counted_with_multiplicity():
    pool = np.array([1.0, 1.0, 3.0])
    # P(D = 3) = (1/3)^m
    for m in (1, 2, 3):
        assert expected_nn_distance_exact([0.0], pool, m) == pytest.approx(1 + 2 * (1 / 3) ** m, abs=1e-15)
        assert expected_nn_distance_exact([0.0], pool, m) == pytest.approx(
            enumerate_memories([0.0], pool, m).mean(), abs=1e-12)


def test_monte_carlo_agrees_on_the_two_point_pool():
    est, se = expected_nn_distance_mc([0.0], TWO, 2, trials=10**5, seed=0)
    assert abs(est - 1.5) <= 3 * se


def test_monte_carlo_saturates_and_is_reproducible(rng):
    pool = rng.standard_normal((8, 2))
    q = rng.standard_normal(2)
    dmin = np.sqrt(((pool - q) ** 2).sum(axis=1)).min()
    est, _ = expected_nn_distance_mc(q, pool, 800, trials=2000, seed=1)
    assert est == pytest.approx(dmin, abs=1e-12)
    assert expected_nn_distance_mc(q, pool, 3, 500, seed=4) == expected_nn_distance_mc(q, pool, 3, 500, seed=4)


def test_without_replacement_variant_takes_the_minimum_at_full_size(rng):
    pool = rng.standard_normal((6, 2))
    q = rng.standard_normal(2)
    dmin = np.sqrt(((pool - q) ** 2).sum(axis=1)).min()
    est, _ = expected_nn_distance_mc(q, pool, 6, trials=300, seed=0, replace=False)
    assert est == pytest.approx(dmin, abs=1e-12)
    # one draw without replacement is one draw with replacement
    a, se = expected_nn_distance_mc(q, pool, 1, trials=20000, seed=0, replace=False)
    assert abs(a - expected_nn_distance_exact(q, pool, 1)) <= 4 * se


def test_identical_queries_have_no_gap(rng):
    pool = rng.standard_normal((10, 3))
    q = rng.standard_normal(3)
    for m in (1, 4, 20):
        assert gap(q, q, pool, m) == 0.0
        assert gap_first_order(q, q, pool, m) == 0.0
        assert remainder_upper_bound(q, q, pool, m) == 0.0


def test_one_dimensional_gap_matches_monte_carlo():
    g = gap([4.0], [0.05], SEPARABLE_1D, 2)
    assert g > 0
    ea, sa = expected_nn_distance_mc([4.0], SEPARABLE_1D, 2, 10**5, seed=10)
    en, sn = expected_nn_distance_mc([0.05], SEPARABLE_1D, 2, 10**5, seed=11)
    assert abs((ea - en) - g) <= 3 * math.hypot(sa, sn)


def test_first_order_term_is_exact_for_a_single_draw(rng):
    for _ in range(10):
        pool, qa, qn = random_separable_instance(rng, 25, 3)
        assert gap_first_order(qa, qn, pool, 1) == pytest.approx(gap(qa, qn, pool, 1), abs=1e-12)
        assert remainder_upper_bound(qa, qn, pool, 1) == 0.0


def test_separable_instance_at_three_draws(rng):
    pool, qa, qn = random_separable_instance(rng, 40, 2)
    g, g0 = gap(qa, qn, pool, 3), gap_first_order(qa, qn, pool, 3)
    assert 0 < g0 <= g + 1e-12
    assert remainder_upper_bound(qa, qn, pool, 3) >= g - g0 - 1e-12 >= -1e-12


def test_integral_and_order_statistic_forms_agree(rng):
    pool, qa, qn = random_separable_instance(rng, 30, 4)
    ga = GapAnalysis.from_queries(qa, qn, pool)
    for m in (1, 2, 7, 40):
        assert ga.expected(m, "norm") == pytest.approx(expected_nn_distance_exact(qn, pool, m), abs=1e-12)
        assert ga.expected(m, "anom") == pytest.approx(expected_nn_distance_exact(qa, pool, m), abs=1e-12)


def test_peak_closed_forms():
    assert weight_unimodal_peak(1 - math.exp(-1)) == pytest.approx(1.0, abs=1e-15)
    assert weight_unimodal_peak(0.1) == pytest.approx(9.4912, abs=5e-5)
    grid = np.arange(1.0, 100.0, 1e-4)
    assert grid[np.argmax(grid * 0.9 ** (grid - 1))] == pytest.approx(9.4912, abs=1e-4)


@pytest.mark.parametrize("pi", [0.0, 1.0, -0.2, 1.5])
def test_peak_domain(pi):
    with pytest.raises(ContractError):
        weight_unimodal_peak(pi)


@given(st.floats(1e-4, 1 - 1e-4), st.integers(2, 60))
def test_integer_argmax_brackets_the_peak(pi, n):
    peak = weight_unimodal_peak(pi)
    m_max = 10 * n
    best = integer_weight_argmax(pi, m_max)
    if peak < m_max:
        assert best in {max(1, math.floor(peak)), max(1, math.ceil(peak))}
        assert check_unimodal(pi, m_max)


def test_shape_check_survives_a_long_underflowing_tail():
    # far enough out the plain weight lands in subnormals and starts creeping upward
    pi, m_max = 0.6091954022988506, 870
    tail = weight(np.arange(700, m_max + 1), pi)
    assert np.any(np.diff(tail) > 0)
    assert check_unimodal(pi, m_max)
    assert integer_weight_argmax(pi, m_max) == 1


def test_weight_is_one_for_a_single_draw():
    assert np.all(weight(1, np.linspace(0, 1, 7)) == 1.0)


def test_constructed_pair_passes_every_check():
    pool = SEPARABLE_1D
    # q_anom = 4 is closer to 0 than q_norm is to 5, so use a farther point
    assert GapAnalysis.from_queries([10.0], [0.05], pool).is_strictly_separable()
    report = verify_theorem(pool, [([10.0], [0.05])], range(1, 31))
    assert report.passed
    assert all(r.gap > 0 for r in report.pairs[0].rows)


def test_swapped_pair_is_flagged_not_raised():
    report = verify_theorem(SEPARABLE_1D, [([0.05], [10.0])], [1, 2, 5])
    pair = report.pairs[0]
    assert not pair.separable and not report.passed
    assert all(r.gap < 0 for r in pair.rows)


def test_report_round_trips(rng):
    pool, qa, qn = random_separable_instance(rng, 20, 2)
    report = verify_theorem(pool, [(qa, qn), (qn, qa)], [1, 2, 3, 10])
    assert TheoremReport.from_kv(report.to_kv()) == report


def test_survival_matches_enumeration_on_a_tiny_pool():
    pool = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    q = [0.4, 0.3]
    for m in (1, 2, 3):
        mins = enumerate_memories(q, pool, m)
        for r in np.unique(mins):
            assert np.mean(mins > r) == pytest.approx((1 - spatial_proportion(q, pool, r)) ** m, abs=1e-15)


def test_higher_normal_proportion_means_lower_survival():
    ga = GapAnalysis.from_queries([10.0], [0.05], SEPARABLE_1D)
    for m in (1, 3):
        mins_n = enumerate_memories([0.05], SEPARABLE_1D, m)
        mins_a = enumerate_memories([10.0], SEPARABLE_1D, m)
        for r, pn, pa in zip(ga.breakpoints, ga.pi_norm, ga.pi_anom):
            assert pn >= pa
            assert np.mean(mins_n > r) <= np.mean(mins_a > r)
            if pn > pa:
                assert np.mean(mins_n > r) < np.mean(mins_a > r)


@given(st.integers(0, 2**31 - 1), st.integers(1, 40))
def test_gap_is_antisymmetric(seed, m):
    rng = np.random.default_rng(seed)
    pool = rng.standard_normal((12, 2))
    a, b = rng.standard_normal(2), rng.standard_normal(2)
    assert gap(a, b, pool, m) == -gap(b, a, pool, m)


@given(st.integers(0, 2**31 - 1))
def test_decomposition_sandwich(seed):
    rng = np.random.default_rng(seed)
    pool, qa, qn = random_separable_instance(rng, 15, 2)
    ga = GapAnalysis.from_queries(qa, qn, pool)
    for m in (1, 2, 3, 8, 25):
        g, g0 = gap(qa, qn, pool, m), ga.gap_first_order(m)
        assert g0 <= g + 1e-9
        assert g <= g0 + ga.remainder_bound(m) + 1e-9
