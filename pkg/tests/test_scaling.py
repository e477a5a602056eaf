import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tests.fixtures import record, scaling_records
from ttcompute.core.records import group_by_task_seed
from ttcompute.exceptions import (
    EmptyInputError,
    InsufficientSamplesError,
    ParameterOutOfRangeError,
)
from ttcompute.scaling.module import (
    build_curve,
    correctness_rate,
    equivalent_k,
    fast1_rate,
    mean_correct_speedup,
    per_task_fast1,
    saturation_k,
    success_at_k,
)
from ttcompute.scaling.objects import (
    CIMethod,
    EquivalentKKind,
    ScalingCurve,
    ScalingPoint,
)


@pytest.fixture(scope="module")
def curve():
    return build_curve(group_by_task_seed(scaling_records()))


def cell_strategy():
    return st.integers(min_value=1, max_value=64).flatmap(
        lambda n: st.tuples(
            st.just(n),
            st.integers(min_value=0, max_value=n),
            st.integers(min_value=1, max_value=n),
        )
    )


# rates


def test_rates_on_a_small_set():
    samples = [
        record(sample_index=0, speedup=1.5),
        record(sample_index=1, speedup=0.9),
        record(sample_index=2, correct=False),
        record(sample_index=3, speedup=2.5),
    ]
    assert fast1_rate(samples) == 0.5
    assert correctness_rate(samples) == 0.75
    assert mean_correct_speedup(samples) == pytest.approx(4.9 / 3)


def test_mean_speedup_without_correct_samples():
    assert mean_correct_speedup([record(correct=False)]) == 0.0


def test_rates_reject_empty_input():
    with pytest.raises(EmptyInputError):
        fast1_rate([])


def test_per_task_fast1():
    rates = per_task_fast1(scaling_records())
    assert rates[4] == pytest.approx(16 / 64)
    assert rates[15] == pytest.approx((56 + 60) / 128)


# success at k


@given(cell_strategy())
def test_success_at_k_matches_binomial_form(cell):
    n, c, k = cell
    expected = 1.0 - math.comb(n - c, k) / math.comb(n, k)
    assert success_at_k(n, c, k) == pytest.approx(expected, abs=1e-9)


@given(cell_strategy())
def test_success_at_k_is_monotone(cell):
    n, c, k = cell
    value = success_at_k(n, c, k)
    assert 0.0 <= value <= 1.0
    if k < n:
        assert success_at_k(n, c, k + 1) >= value - 1e-12
    if c < n:
        assert success_at_k(n, c + 1, k) >= value - 1e-12


def test_success_at_k_edges():
    assert success_at_k(64, 0, 64) == 0.0
    assert success_at_k(64, 1, 64) == 1.0
    assert success_at_k(64, 16, 1) == pytest.approx(0.25)


def test_success_at_k_against_sampling():
    n, c, k = 64, 10, 8
    rng = np.random.default_rng(42)
    hits = 0
    trials = 20000
    for _ in range(trials):
        drawn = rng.choice(n, size=k, replace=False)
        hits += int((drawn < c).any())
    assert success_at_k(n, c, k) == pytest.approx(hits / trials, abs=0.015)


@pytest.mark.parametrize("n, c, k", [(4, 5, 1), (4, -1, 1), (4, 2, 0), (4, 2, 5)])
def test_success_at_k_rejects_bad_arguments(n, c, k):
    with pytest.raises(ParameterOutOfRangeError):
        success_at_k(n, c, k)


# curves


def test_curve_endpoints(curve):
    assert curve.ks == [1, 2, 4, 8, 16, 32, 64]
    assert curve.seeds == 2
    assert curve.tasks == 5
    assert curve.at(1).mean == pytest.approx(0.533, abs=1e-3)
    assert curve.at(16).mean == pytest.approx(0.999, abs=1e-3)
    assert curve.at(64).mean == pytest.approx(1.0)
    assert curve.at(1).std == pytest.approx(0.0328, abs=1e-4)


def test_range_interval_spans_cells(curve):
    assert curve.ci_method == CIMethod.RANGE
    assert curve.at(1).ci_low == pytest.approx(16 / 64)
    assert curve.at(1).ci_high == pytest.approx(60 / 64)


def test_curve_is_non_decreasing(curve):
    assert all(b >= a for a, b in zip(curve.means, curve.means[1:]))


def test_bootstrap_falls_back_with_two_seeds():
    groups = group_by_task_seed(scaling_records())
    assert build_curve(groups, ci_method="bootstrap").ci_method == CIMethod.RANGE


def test_bootstrap_interval_with_three_seeds():
    records = scaling_records() + [
        r.model_copy(update={"seed": 44}) for r in scaling_records() if r.seed == 42
    ]
    curve = build_curve(group_by_task_seed(records), ks=(1, 8), ci_method="bootstrap")
    assert curve.ci_method == CIMethod.BOOTSTRAP
    point = curve.at(1)
    assert point.ci_low <= point.mean <= point.ci_high
    assert build_curve(
        group_by_task_seed(records), ks=(1, 8), ci_method="bootstrap"
    ) == curve


def test_curve_needs_enough_samples():
    groups = group_by_task_seed(scaling_records(n=32))
    with pytest.raises(InsufficientSamplesError):
        build_curve(groups)
    assert build_curve(groups, ks=(1, 32)).ks == [1, 32]


def test_curve_needs_groups():
    with pytest.raises(EmptyInputError):
        build_curve({})


def test_curve_rejects_decreasing_means():
    with pytest.raises(ValueError):
        ScalingCurve(
            points=[
                ScalingPoint(K=1, mean=0.5, std=0, ci_low=0.5, ci_high=0.5),
                ScalingPoint(K=2, mean=0.4, std=0, ci_low=0.4, ci_high=0.4),
            ]
        )


# equivalent k and saturation


def test_rate_below_k1_is_reported(curve):
    result = equivalent_k(curve, 0.306)
    assert result.kind == EquivalentKKind.BELOW_K1
    assert result.K is None


def test_equivalent_k_interpolates_in_log_k(curve):
    result = equivalent_k(curve, 0.8)
    assert result.kind == EquivalentKKind.VALUE
    assert 2 < result.K < 4
    assert result.K == pytest.approx(2.746, abs=0.01)


def test_equivalent_k_on_grid_point(curve):
    assert equivalent_k(curve, curve.at(8).mean).K == 8


def test_equivalent_k_flat_stretch_takes_smallest():
    points = [
        ScalingPoint(K=1, mean=0.5, std=0, ci_low=0.5, ci_high=0.5),
        ScalingPoint(K=2, mean=0.8, std=0, ci_low=0.8, ci_high=0.8),
        ScalingPoint(K=4, mean=0.8, std=0, ci_low=0.8, ci_high=0.8),
    ]
    assert equivalent_k(ScalingCurve(points=points), 0.8).K == 2


def test_equivalent_k_above_curve():
    points = [
        ScalingPoint(K=1, mean=0.2, std=0, ci_low=0.2, ci_high=0.2),
        ScalingPoint(K=2, mean=0.3, std=0, ci_low=0.3, ci_high=0.3),
    ]
    result = equivalent_k(ScalingCurve(points=points), 0.5)
    assert result.kind == EquivalentKKind.ABOVE_KMAX


def test_saturation(curve):
    assert saturation_k(curve, 0.005) == 16
    assert saturation_k(curve, 0.5) == 1
    assert saturation_k(curve, 0.0) == 64
