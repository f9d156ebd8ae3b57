"""Distance estimators: Wasserstein routes, the k* sandwich, entropy."""

import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog
from scipy.stats import multivariate_normal, wasserstein_distance

from mflab.metrics import (CombinedResult, DistanceSeries, EstimatorError,
                           GaussianRef, KStarEstimate, assignment_w1_1d,
                           combined_w, gaussian_w2, kstar_distance,
                           relative_entropy, silverman_bandwidth,
                           wasserstein_p)
from mflab.model import EmpiricalMeasure, ValidationError


def _emp1(values, weights=None):
    arr = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    if weights is None:
        return EmpiricalMeasure.from_samples(arr)
    return EmpiricalMeasure(samples=arr, weights=np.asarray(weights, float))


def _emp(points, weights=None):
    arr = np.asarray(points, dtype=np.float64)
    if weights is None:
        return EmpiricalMeasure.from_samples(arr)
    return EmpiricalMeasure(samples=arr, weights=np.asarray(weights, float))


# ---------------------------------------------------------------------------
# Wasserstein distances


def test_point_masses_distance_is_gap():
    mu = _emp1([0.3])
    nu = _emp1([1.7])
    for p in (1, 2):
        val = wasserstein_p(mu, nu, p)
        assert val == pytest.approx(1.4, abs=1e-15)
        assert val.method == "sorted_1d"


def test_identical_cloud_distance_zero(rng):
    pts = rng.normal(size=(30, 1))
    mu = _emp(pts)
    assert wasserstein_p(mu, mu, 1) == 0.0
    assert wasserstein_p(mu, mu, 2) == 0.0


def test_two_point_shift_half():
    mu = _emp1([0.0, 1.0])
    nu = _emp1([0.5, 1.5])
    assert wasserstein_p(mu, nu, 1) == pytest.approx(0.5, abs=1e-15)
    assert wasserstein_p(mu, nu, 2) == pytest.approx(0.5, abs=1e-15)


def test_invalid_order_and_dimension_mismatch(rng):
    mu = _emp1([0.0, 1.0])
    with pytest.raises(ValidationError, match="p in"):
        wasserstein_p(mu, mu, 3)
    nu2 = _emp(rng.normal(size=(2, 2)))
    with pytest.raises(ValidationError, match="dimension"):
        wasserstein_p(mu, nu2, 1)


def test_weighted_1d_w1_matches_scipy(rng):
    xs = rng.normal(size=11)
    ys = rng.normal(size=7) + 0.4
    wx = rng.uniform(0.2, 1.0, size=11)
    wx /= wx.sum()
    wy = rng.uniform(0.2, 1.0, size=7)
    wy /= wy.sum()
    ours = wasserstein_p(_emp1(xs, wx), _emp1(ys, wy), 1)
    ref = wasserstein_distance(xs, ys, wx, wy)
    assert ours == pytest.approx(ref, rel=1e-10)
    assert ours.method == "quantile_1d"


def test_weighted_quantile_route_matches_expanded_multiset():
    """Rational weights expand to a uniform multiset; the answers must agree.

    Both representations describe the same pair of measures, so the weighted
    quantile route and the sorted uniform route are two solvers for one
    problem.
    """
    mu_w = _emp1([0.0, 1.0, 3.0], [3 / 8, 3 / 8, 2 / 8])
    nu_w = _emp1([0.5, 2.0], [0.5, 0.5])
    mu_u = _emp1([0.0] * 3 + [1.0] * 3 + [3.0] * 2)
    nu_u = _emp1([0.5] * 4 + [2.0] * 4)
    for p in (1, 2):
        a = wasserstein_p(mu_w, nu_w, p)
        b = wasserstein_p(mu_u, nu_u, p)
        assert a.method == "quantile_1d"
        assert b.method == "sorted_1d"
        assert a == pytest.approx(b, rel=1e-12)


def test_unequal_sizes_use_quantile_route(rng):
    xs = rng.normal(size=3)
    ys = rng.normal(size=5)
    val = wasserstein_p(_emp1(xs), _emp1(ys), 1)
    assert val.method == "quantile_1d"
    assert val == pytest.approx(wasserstein_distance(xs, ys), rel=1e-10)


def _brute_force_wp(xs, ys, p):
    n = xs.shape[0]
    best = math.inf
    for perm in itertools.permutations(range(n)):
        gaps = np.linalg.norm(xs - ys[list(perm)], axis=1)
        cost = float(np.mean(gaps ** p))
        best = min(best, cost)
    return best ** (1.0 / p)


def test_2d_assignment_matches_brute_force(rng):
    xs = rng.normal(size=(5, 2))
    ys = rng.normal(size=(5, 2)) + 0.3
    for p in (1, 2):
        val = wasserstein_p(_emp(xs), _emp(ys), p)
        assert val.method == "assignment"
        assert val == pytest.approx(_brute_force_wp(xs, ys, p), rel=1e-12)


def _exact_lp_wp(xs, wx, ys, wy, p):
    n, m = xs.shape[0], ys.shape[0]
    diff = xs[:, None, :] - ys[None, :, :]
    c = np.sqrt(np.sum(diff * diff, axis=2))
    if p == 2:
        c = c ** 2
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    res = linprog(c.ravel(), A_eq=A_eq, b_eq=np.concatenate([wx, wy]),
                  bounds=(0, None), method="highs")
    assert res.status == 0, res.message
    return res.fun if p == 1 else math.sqrt(res.fun)


def test_weighted_2d_entropic_route_matches_lp():
    r = np.random.default_rng(42)
    xs = r.normal(size=(6, 2))
    ys = r.normal(size=(5, 2)) + 0.5
    wx = r.uniform(0.5, 1.5, size=6)
    wx /= wx.sum()
    wy = r.uniform(0.5, 1.5, size=5)
    wy /= wy.sum()
    mu = _emp(xs, wx)
    nu = _emp(ys, wy)
    for p in (1, 2):
        val = wasserstein_p(mu, nu, p)
        exact = _exact_lp_wp(xs, wx, ys, wy, p)
        assert val.method == "sinkhorn"
        assert val == pytest.approx(exact, rel=0.05)


def test_metric_axioms_on_exact_2d_route(rng):
    a = _emp(rng.normal(size=(6, 2)))
    b = _emp(rng.normal(size=(6, 2)) + 0.2)
    c = _emp(rng.normal(size=(6, 2)) - 0.4)
    for p in (1, 2):
        ab = wasserstein_p(a, b, p)
        ba = wasserstein_p(b, a, p)
        assert ab == pytest.approx(ba, rel=1e-12)
        assert wasserstein_p(a, c, p) <= ab + wasserstein_p(b, c, p) + 1e-9


def test_w1_bounded_by_w2(rng):
    for d in (1, 2):
        mu = _emp(rng.normal(size=(20, d)))
        nu = _emp(rng.normal(size=(20, d)) * 1.3 + 0.5)
        assert wasserstein_p(mu, nu, 1) <= wasserstein_p(mu, nu, 2) + 1e-12


def test_affine_equivariance_1d(rng):
    xs = rng.normal(size=12)
    ys = rng.normal(size=12)
    a, shift = -2.5, 3.0
    for p in (1, 2):
        base = wasserstein_p(_emp1(xs), _emp1(ys), p)
        moved = wasserstein_p(_emp1(a * xs + shift), _emp1(a * ys + shift), p)
        assert moved == pytest.approx(abs(a) * base, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=10),
       st.lists(st.floats(-50, 50), min_size=2, max_size=10),
       st.sampled_from([1, 2]))
def test_distance_properties_hold_for_arbitrary_clouds(xs, ys, p):
    mu = _emp1(np.array(xs))
    nu = _emp1(np.array(ys))
    fwd = wasserstein_p(mu, nu, p)
    assert fwd >= 0.0
    assert fwd == pytest.approx(wasserstein_p(nu, mu, p), abs=1e-9 + 1e-9 * fwd)
    doubled = wasserstein_p(_emp1(2.0 * np.array(xs)),
                            _emp1(2.0 * np.array(ys)), p)
    assert doubled == pytest.approx(2.0 * fwd, abs=1e-9 + 1e-9 * fwd)


def test_assignment_cross_check_route(rng):
    xs = rng.normal(size=40)
    ys = rng.normal(size=40) + 0.7
    via_assignment = assignment_w1_1d(_emp1(xs), _emp1(ys))
    via_sort = wasserstein_p(_emp1(xs), _emp1(ys), 1)
    assert via_assignment.method == "assignment"
    assert abs(via_assignment - via_sort) < 1e-10
    with pytest.raises(ValidationError, match="equal-size 1-d"):
        assignment_w1_1d(_emp(rng.normal(size=(4, 2))),
                         _emp(rng.normal(size=(4, 2))))
    with pytest.raises(ValidationError, match="equal-size 1-d"):
        assignment_w1_1d(_emp1(xs[:3]), _emp1(ys[:5]))


# ---------------------------------------------------------------------------
# Gaussian closed forms


def test_gaussian_w2_closed_forms():
    assert gaussian_w2([0.0], [[1.0]], [0.0], [[1.0]]) == pytest.approx(0.0)
    assert gaussian_w2([0.0, 0.0], np.eye(2), [1.0, 2.0], np.eye(2)) \
        == pytest.approx(math.sqrt(5.0), abs=1e-12)
    assert gaussian_w2([0.0], [[1.0]], [0.0], [[4.0]]) \
        == pytest.approx(1.0, abs=1e-12)
    c1 = np.diag([1.0, 4.0])
    c2 = np.diag([9.0, 16.0])
    assert gaussian_w2([0.0, 0.0], c1, [0.0, 0.0], c2) \
        == pytest.approx(math.sqrt(8.0), abs=1e-12)
    assert gaussian_w2([3.0, 0.0], c1, [0.0, 0.0], c2) \
        == pytest.approx(math.sqrt(9.0 + 8.0), abs=1e-12)


def test_gaussian_w2_rejects_indefinite_covariance():
    with pytest.raises(ValidationError, match="positive semidefinite"):
        gaussian_w2([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]],
                    [0.0, 0.0], np.eye(2))


# ---------------------------------------------------------------------------
# k* sandwich


def test_kstar_estimate_bookkeeping():
    est = KStarEstimate(lower=0.2, upper=0.6, bandwidth=0.1, cell_size=2.0)
    assert est.midpoint == pytest.approx(0.4)
    assert est.width == pytest.approx(0.4)
    with pytest.raises(ValidationError):
        KStarEstimate(lower=0.7, upper=0.6, bandwidth=0.1, cell_size=2.0)
    with pytest.raises(ValidationError):
        KStarEstimate(lower=-0.1, upper=0.6, bandwidth=0.1, cell_size=2.0)


def test_kstar_same_samples_is_zero(rng):
    pts = rng.normal(size=(200, 1))
    est = kstar_distance(_emp(pts), _emp(pts), 2.0)
    assert est.lower == 0.0
    assert est.upper == 0.0


def test_kstar_atomic_sup_exact_values():
    far = kstar_distance(_emp1([0.0]), _emp1([5.0]), np.inf)
    assert far.lower == far.upper == pytest.approx(2.0)
    assert far.bandwidth == 0.0 and far.cell_size == 0.0

    mu = _emp1([0.0, 1.0], [0.5, 0.5])
    nu = _emp1([0.0, 2.0], [0.25, 0.75])
    mixed = kstar_distance(mu, nu, np.inf)
    assert mixed.lower == mixed.upper == pytest.approx(1.5)


def test_kstar_validation(rng):
    mu = _emp1(rng.normal(size=50))
    nu = _emp1(rng.normal(size=50))
    with pytest.raises(ValidationError, match="k > 1"):
        kstar_distance(mu, nu, 1.0)
    with pytest.raises(ValidationError, match="d <= 2"):
        kstar_distance(_emp(rng.normal(size=(50, 3))),
                       _emp(rng.normal(size=(50, 3))), 2.0)
    with pytest.raises(ValidationError, match="cell_size"):
        kstar_distance(mu, nu, 2.0, cell_size=2.5)
    with pytest.raises(ValidationError, match="cell_size"):
        kstar_distance(mu, nu, 2.0, cell_size=0.0)
    with pytest.raises(ValidationError, match="bandwidth"):
        kstar_distance(mu, nu, 2.0, bandwidth=-1.0)


def test_kstar_sandwich_orders_and_records(rng):
    mu = _emp1(rng.normal(0.0, 1.0, size=500))
    nu = _emp1(rng.normal(1.0, 1.0, size=500))
    est = kstar_distance(mu, nu, 2.0)
    assert 0.0 < est.lower <= est.upper
    assert est.lower <= est.midpoint <= est.upper
    assert est.bandwidth > 0.0
    assert est.cell_size == pytest.approx(2.0)


def test_kstar_midpoint_shrinks_with_shift():
    mids = []
    for s in (0.4, 0.2, 0.1):
        r = np.random.default_rng(911)
        mu = _emp(r.normal(0.0, 0.2, (2000, 1)))
        nu = _emp(r.normal(s, 0.2, (2000, 1)))
        mids.append(kstar_distance(mu, nu, 2.0).midpoint)
    assert mids[0] > mids[1] > mids[2] > 0.0


@pytest.mark.filterwarnings("ignore:Solution may be inaccurate")
def test_kstar_sandwich_contains_convex_dual_optimum():
    """The windowed bound and the partition bound must bracket the value of
    the dual program solved exactly on the same density grid."""
    import oracle_kstar

    r = np.random.default_rng(911)
    mu = _emp(r.normal(0.0, 0.2, (2000, 1)))
    nu = _emp(r.normal(0.2, 0.2, (2000, 1)))
    est = kstar_distance(mu, nu, 2.0)
    oracle = oracle_kstar.oracle_for_pair(mu, nu, 2.0)
    assert est.lower - 1e-9 <= oracle <= est.upper + 1e-9
    assert est.midpoint == pytest.approx(oracle, rel=0.15)


def test_kstar_inf_with_bandwidth_uses_kde(rng):
    mu = _emp(rng.normal(-1.0, 0.1, (400, 1)))
    nu = _emp(rng.normal(1.0, 0.1, (400, 1)))
    est = kstar_distance(mu, nu, np.inf, bandwidth=0.3)
    assert est.bandwidth == pytest.approx(0.3)
    assert 0.0 < est.lower <= est.upper <= 2.0 + 1e-9


# ---------------------------------------------------------------------------
# entropy


def test_gaussian_ref_log_density_matches_reference(rng):
    ref1 = GaussianRef(mean=[0.5], cov=[[2.25]])
    pts1 = rng.normal(size=(40, 1))
    expected1 = multivariate_normal(mean=[0.5], cov=[[2.25]]).logpdf(pts1)
    np.testing.assert_allclose(ref1.log_density(pts1), expected1, rtol=1e-12)

    cov2 = np.array([[2.0, 0.3], [0.3, 1.0]])
    ref2 = GaussianRef(mean=[1.0, -1.0], cov=cov2)
    pts2 = rng.normal(size=(40, 2))
    expected2 = multivariate_normal(mean=[1.0, -1.0], cov=cov2).logpdf(pts2)
    np.testing.assert_allclose(ref2.log_density(pts2), expected2, rtol=1e-12)


def test_gaussian_ref_scalar_cov_and_validation():
    ref = GaussianRef(mean=[0.0, 0.0], cov=2.0)
    np.testing.assert_allclose(ref.cov, 2.0 * np.eye(2))
    assert ref.dim == 2
    with pytest.raises(ValidationError, match="positive-definite"):
        GaussianRef(mean=[0.0, 0.0], cov=[[1.0, 2.0], [2.0, 1.0]])


def test_relative_entropy_gaussian_closed_forms():
    std = GaussianRef(mean=[0.0], cov=[[1.0]])
    assert relative_entropy(std, std) == pytest.approx(0.0, abs=1e-15)
    shifted = GaussianRef(mean=[1.0], cov=[[1.0]])
    assert relative_entropy(shifted, std) == pytest.approx(0.5, abs=1e-14)

    cov_a = np.array([[2.0, 0.3], [0.3, 1.0]])
    a = GaussianRef(mean=[1.0, -1.0], cov=cov_a)
    b = GaussianRef(mean=[0.0, 0.0], cov=np.eye(2))
    manual = 0.5 * (np.trace(cov_a) + 2.0 - 2.0
                    - math.log(np.linalg.det(cov_a)))
    assert relative_entropy(a, b) == pytest.approx(manual, rel=1e-12)

    with pytest.raises(ValidationError, match="dimensions differ"):
        relative_entropy(std, b)


def test_relative_entropy_kde_against_exact_reference():
    r = np.random.default_rng(2024)
    samples = r.normal(1.0, 1.0, size=(10000, 1))
    val = relative_entropy(EmpiricalMeasure.from_samples(samples),
                           GaussianRef(mean=[0.0], cov=[[1.0]]))
    assert val == pytest.approx(0.5, abs=0.1)


def test_relative_entropy_same_law_is_small():
    r = np.random.default_rng(7)
    samples = r.normal(0.0, 1.0, size=(5000, 1))
    val = relative_entropy(EmpiricalMeasure.from_samples(samples),
                           GaussianRef(mean=[0.0], cov=[[1.0]]))
    assert 0.0 <= val < 0.05


def test_relative_entropy_both_empirical():
    r = np.random.default_rng(2024)
    base = EmpiricalMeasure.from_samples(r.normal(0.0, 1.0, size=(3000, 1)))
    twin = EmpiricalMeasure.from_samples(r.normal(0.0, 1.0, size=(3000, 1)))
    assert relative_entropy(twin, base) < 0.1
    moved = EmpiricalMeasure.from_samples(r.normal(1.0, 1.0, size=(3000, 1)))
    assert 0.3 < relative_entropy(moved, base) < 0.75


def test_relative_entropy_2d_plugin():
    r = np.random.default_rng(2024)
    z = r.multivariate_normal([0.5, 0.0], np.eye(2), size=4000)
    val = relative_entropy(EmpiricalMeasure.from_samples(z),
                           GaussianRef(mean=[0.0, 0.0], cov=np.eye(2)))
    assert val == pytest.approx(0.125, abs=0.075)


def test_relative_entropy_validation(rng):
    std = GaussianRef(mean=[0.0], cov=[[1.0]])
    small = _emp1(rng.normal(size=50))
    with pytest.raises(ValidationError, match="at least 100"):
        relative_entropy(small, std)
    wide = _emp(rng.normal(size=(200, 3)))
    with pytest.raises(ValidationError, match="d <= 2"):
        relative_entropy(wide, GaussianRef(mean=[0.0] * 3, cov=np.eye(3)))
    with pytest.raises(ValidationError, match="must be empirical"):
        relative_entropy(std, _emp1(rng.normal(size=200)))
    big = _emp1(rng.normal(size=200))
    with pytest.raises(ValidationError, match="at least 100"):
        relative_entropy(big, _emp1(rng.normal(size=50)))
    with pytest.raises(ValidationError, match="bandwidth"):
        relative_entropy(big, std, bandwidth=-0.1)


# ---------------------------------------------------------------------------
# combined metric and series


def test_combined_metric_zero_for_equal(rng):
    pts = rng.normal(size=(300, 1))
    val = combined_w(_emp(pts), _emp(pts), 2.0)
    assert val == 0.0
    assert val.uncertainty == 0.0


def test_combined_metric_point_masses_exact():
    val = combined_w(_emp1([0.0]), _emp1([1.0]), np.inf)
    assert isinstance(val, CombinedResult)
    assert val == pytest.approx(3.0, abs=1e-12)
    assert val.w1 == pytest.approx(1.0)
    assert val.kstar.lower == pytest.approx(2.0)
    assert val.uncertainty == 0.0


def test_combined_metric_dominates_w1(rng):
    mu = _emp1(rng.normal(0.0, 0.5, size=400))
    nu = _emp1(rng.normal(0.8, 0.5, size=400))
    val = combined_w(mu, nu, 2.0)
    assert val >= val.w1
    assert val.uncertainty == pytest.approx(val.kstar.width / 2.0)


def test_distance_series_validation():
    with pytest.raises(ValidationError, match="strictly increase"):
        DistanceSeries(times=(1.0, 1.0), w1=(0.1, 0.1), w2=(0.1, 0.1))
    with pytest.raises(ValidationError, match="w1 length"):
        DistanceSeries(times=(0.0, 1.0), w1=(0.1,), w2=(0.1, 0.1))
    with pytest.raises(ValidationError, match="entropy length"):
        DistanceSeries(times=(0.0, 1.0), w1=(0.1, 0.1), w2=(0.1, 0.1),
                       entropy=(0.5,))
    with pytest.raises(ValidationError, match="nonnegative"):
        DistanceSeries(times=(0.0, 1.0), w1=(-0.1, 0.1), w2=(0.1, 0.1))


def test_distance_series_csv_round_trip(tmp_path):
    series = DistanceSeries(
        times=(0.5, 1.0),
        w1=(0.25, 0.125),
        w2=(0.3, 0.2),
        kstar=(KStarEstimate(0.1, 0.3, 0.2, 2.0),
               KStarEstimate(0.05, 0.2, 0.2, 2.0)),
        entropy=(1.5, 0.75),
    )
    path = tmp_path / "series.csv"
    series.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "time,w1,w2,kstar_lower,kstar_upper,entropy"
    assert lines[1] == "0.5,0.25,0.3,0.1,0.3,1.5"
    assert lines[2] == "1.0,0.125,0.2,0.05,0.2,0.75"

    bare = DistanceSeries(times=(0.5,), w1=(0.25,), w2=(0.3,))
    bare_path = tmp_path / "bare.csv"
    bare.to_csv(bare_path)
    assert bare_path.read_text().splitlines()[1] == "0.5,0.25,0.3,,,"


# ---------------------------------------------------------------------------
# bandwidth rule


def test_silverman_scales_linearly(rng):
    pts = rng.normal(size=(250, 2))
    base = silverman_bandwidth(pts)
    assert silverman_bandwidth(3.0 * pts) == pytest.approx(3.0 * base,
                                                           rel=1e-12)


def test_silverman_degenerate_column_fallback():
    const = np.full((100, 1), 3.0)
    assert silverman_bandwidth(const) == pytest.approx(0.9 * 100 ** (-0.2))
