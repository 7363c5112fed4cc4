import math

import numpy as np
import pytest
import scipy.stats

from mapss.errors import DegenerateMoments, SingleSource
from mapss.measures import (
    ClusterStatsPM,
    ClusterStatsPS,
    GammaFit,
    compute_pm,
    compute_ps,
    fit_gamma,
    ks_gamma_diagnostic,
    mahalanobis,
    pm_gradient,
    ps_gradient,
    score_frame,
    squared_distance_set,
)


# --- Mahalanobis ----------------------------------------------------------------

def test_mahalanobis_at_center():
    sigma = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert mahalanobis(np.ones(2), np.ones(2), sigma) == 0.0


def test_mahalanobis_identity_covariance():
    x, mu = np.array([3.0, -1.0, 2.0]), np.zeros(3)
    d = mahalanobis(x, mu, np.eye(3), eps=1e-12)
    assert d == pytest.approx(np.linalg.norm(x), rel=1e-9)


def test_mahalanobis_diagonal_oracle():
    # Direct inverse of diag(4, 1) + eps as the oracle.
    eps = 1e-6
    expected = math.sqrt(4.0 / (4.0 + eps))
    got = mahalanobis(np.array([2.0, 0.0]), np.zeros(2), np.diag([4.0, 1.0]), eps)
    assert got == pytest.approx(expected, abs=1e-12)


def test_mahalanobis_validation():
    with pytest.raises(ValueError):
        mahalanobis(np.zeros(2), np.zeros(3), np.eye(3))
    with pytest.raises(ValueError):
        mahalanobis(np.zeros(2), np.zeros(2), np.eye(2), eps=0.0)


# --- separation score -------------------------------------------------------------

def _clusters_at(a_dist, b_dist):
    """Two isotropic unit clusters placed so the output at the origin sits at
    the requested distances."""
    rng = np.random.default_rng(5)
    base = rng.standard_normal((40, 3))
    base -= base.mean(axis=0)
    # whiten to exactly unit sample covariance
    chol = np.linalg.cholesky(np.cov(base, rowvar=False))
    white = base @ np.linalg.inv(chol).T
    c0 = white + np.array([a_dist, 0.0, 0.0])
    c1 = white + np.array([0.0, b_dist, 0.0])
    return {0: ClusterStatsPS.from_members(c0), 1: ClusterStatsPS.from_members(c1)}


def test_ps_arithmetic_cases():
    out = np.zeros(3)
    for a, b, want in [(3.0, 1.0, 0.25), (2.0, 2.0, 0.5)]:
        clusters = _clusters_at(a, b)
        ps, a_hat, b_hat, j_star = compute_ps(out, clusters, 0)
        assert a_hat == pytest.approx(a, rel=1e-6)
        assert b_hat == pytest.approx(b, rel=1e-6)
        assert ps == pytest.approx(want, rel=1e-6)
        assert j_star == 1


def test_ps_at_own_centroid_is_one():
    clusters = _clusters_at(0.0, 4.0)
    ps, a_hat, _, _ = compute_ps(np.zeros(3), clusters, 0)
    assert a_hat == pytest.approx(0.0, abs=1e-9)
    assert ps == pytest.approx(1.0, abs=1e-9)


def test_ps_needs_two_clusters():
    clusters = {0: _clusters_at(1.0, 1.0)[0]}
    with pytest.raises(SingleSource):
        compute_ps(np.zeros(3), clusters, 0)


def test_ps_tie_breaks_to_smallest_index(rng):
    members = rng.standard_normal((20, 2))
    stats = ClusterStatsPS.from_members(members)
    clusters = {0: stats, 1: stats, 2: stats}
    _, _, _, j_star = compute_ps(np.array([5.0, 5.0]), clusters, 0)
    assert j_star == 1


def test_ps_monotone_in_distances():
    # Decreasing in the attributed distance, increasing in the foreign one.
    out = np.zeros(3)
    ps_values = [compute_ps(out, _clusters_at(a, 1.0), 0)[0]
                 for a in (0.5, 1.0, 2.0, 4.0)]
    assert all(x > y for x, y in zip(ps_values, ps_values[1:]))
    ps_values = [compute_ps(out, _clusters_at(1.0, b), 0)[0]
                 for b in (0.5, 1.0, 2.0, 4.0)]
    assert all(x < y for x, y in zip(ps_values, ps_values[1:]))


# --- exclusion of the output from cluster statistics -------------------------------

def test_output_excluded_from_cluster_stats(rng):
    # The implementation's stats must equal an oracle computed without the
    # output row; inserting the output row must change them.
    embedded = rng.standard_normal((16, 4))
    sources = np.array([0] * 8 + [1] * 8)
    kinds = np.array([0, 1] + [2] * 6 + [0, 1] + [2] * 6)
    scores = score_frame(embedded, sources, kinds, measures=("ps",))
    members_without = embedded[(sources == 0) & (kinds != 0)]
    oracle = ClusterStatsPS.from_members(members_without)
    own_a = mahalanobis(embedded[(sources == 0) & (kinds == 0)][0],
                        oracle.centroid, oracle.covariance)
    assert scores[0].a_hat == pytest.approx(own_a, rel=1e-12)
    with_output = np.vstack([embedded[(sources == 0)]])
    polluted = ClusterStatsPS.from_members(with_output)
    assert not np.allclose(polluted.centroid, oracle.centroid)


# --- gamma fitting ------------------------------------------------------------------

def test_fit_gamma_moment_arithmetic():
    # mean 2, unbiased variance 2 -> shape 2, scale 1
    g = np.array([1.0, 3.0, 1.0, 3.0, 2.0])
    mean, var = g.mean(), g.var(ddof=1)
    fit = fit_gamma(g)
    assert fit.shape == pytest.approx(mean**2 / var, abs=1e-15)
    assert fit.scale == pytest.approx(var / mean, abs=1e-15)
    # invariant: parameters reproduce the stored moments exactly
    assert fit.shape * fit.scale == pytest.approx(fit.mean, abs=1e-12)
    assert fit.shape * fit.scale**2 == pytest.approx(fit.variance, abs=1e-12)


def test_fit_gamma_degenerate():
    with pytest.raises(DegenerateMoments):
        fit_gamma(np.full(10, 3.0))
    with pytest.raises(DegenerateMoments):
        fit_gamma(np.array([1.0]))


def test_fit_gamma_statistical_recovery():
    rng = np.random.default_rng(42)
    draws = rng.gamma(shape=3.0, scale=0.5, size=10_000)
    fit = fit_gamma(draws)
    assert 2.7 <= fit.shape <= 3.3
    assert 0.45 <= fit.scale <= 0.55


# --- match score --------------------------------------------------------------------

def test_pm_closed_forms():
    fit = GammaFit(shape=1.0, scale=1.0, mean=1.0, variance=1.0)
    assert compute_pm(fit, 0.0) == 1.0
    assert compute_pm(fit, math.log(2.0)) == pytest.approx(0.5, abs=1e-12)
    assert compute_pm(fit, 500.0) < 1e-100


def test_pm_monotone_nonincreasing(rng):
    fit = GammaFit(shape=2.3, scale=0.8, mean=2.3 * 0.8, variance=2.3 * 0.64)
    a = np.sort(rng.uniform(0.0, 20.0, size=1000))
    pm = np.array([compute_pm(fit, v) for v in a])
    assert np.all(np.diff(pm) <= 1e-15)


def test_pm_derivative_matches_finite_difference():
    fit = GammaFit(shape=2.0, scale=1.5, mean=3.0, variance=4.5)
    h = 1e-6
    for a in (0.5, 2.0, 7.0):
        numeric = (compute_pm(fit, a + h) - compute_pm(fit, a - h)) / (2 * h)
        from mapss.special import upper_gamma_dx
        analytic = upper_gamma_dx(fit.shape, a / fit.scale) / fit.scale
        assert analytic == pytest.approx(numeric, rel=1e-4)


# --- KS diagnostic -------------------------------------------------------------------

def test_ks_calibration_on_true_gamma():
    passes = 0
    trials = 40
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        draws = rng.gamma(2.5, 1.3, size=500)
        fit = fit_gamma(draws)
        _, passed, low_power = ks_gamma_diagnostic(fit, draws)
        passes += passed
        assert not low_power
    assert passes >= 0.9 * trials


def test_ks_rejects_uniform():
    rng = np.random.default_rng(3)
    draws = rng.uniform(10.0, 11.0, size=500)
    fit = fit_gamma(draws)
    stat, passed, _ = ks_gamma_diagnostic(fit, draws)
    # oracle: scipy one-sample KS against the same fitted gamma
    ref = scipy.stats.kstest(draws, "gamma",
                             args=(fit.shape, 0.0, fit.scale))
    assert stat == pytest.approx(ref.statistic, abs=1e-10)
    assert not passed


def test_ks_small_sample_low_power():
    fit = GammaFit(shape=2.0, scale=1.0, mean=2.0, variance=2.0)
    stat, _, low_power = ks_gamma_diagnostic(fit, np.array([1.0, 2.5]))
    assert math.isfinite(stat)
    assert low_power


def test_ks_statistic_matches_scipy_oracle(rng):
    for _ in range(10):
        draws = rng.gamma(3.0, 2.0, size=rng.integers(5, 200))
        fit = fit_gamma(draws)
        stat, _, _ = ks_gamma_diagnostic(fit, draws)
        ref = scipy.stats.kstest(draws, "gamma", args=(fit.shape, 0.0, fit.scale))
        assert stat == pytest.approx(ref.statistic, abs=1e-9)


# --- gradients -----------------------------------------------------------------------

def _finite_difference(fn, x, h=1e-5):
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (fn(x + step) - fn(x - step)) / (2 * h)
    return grad


def test_ps_gradient_matches_finite_difference(rng):
    clusters = _clusters_at(2.0, 1.5)
    out = np.array([0.3, -0.2, 0.1])

    def ps_of(x):
        return compute_ps(x, clusters, 0)[0]

    # nearest foreign cluster must be locally constant around the point
    assert compute_ps(out * 0.99, clusters, 0)[3] == compute_ps(out * 1.01,
                                                                clusters, 0)[3]
    analytic = ps_gradient(out, clusters, 0)
    numeric = _finite_difference(ps_of, out)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-3)


def test_pm_gradient_matches_finite_difference(rng):
    ref = rng.standard_normal(4)
    dists = ref + 0.5 * rng.standard_normal((30, 4))
    cluster = ClusterStatsPM.from_members(ref, dists)
    g_set = squared_distance_set(cluster, dists)
    fit = fit_gamma(g_set)
    out = ref + np.array([0.4, -0.1, 0.2, 0.05])

    def pm_of(x):
        delta = x - cluster.reference
        import scipy.linalg
        a_sq = float(delta @ scipy.linalg.solve(
            cluster.covariance + 1e-6 * np.eye(4), delta))
        return compute_pm(fit, a_sq)

    analytic = pm_gradient(out, cluster, fit)
    numeric = _finite_difference(pm_of, out)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-3, atol=1e-10)


# --- frame scoring -------------------------------------------------------------------

def test_score_frame_structure(rng):
    n_p = 6
    rows, sources, kinds = [], [], []
    for src in (0, 1):
        center = rng.standard_normal(5) * 2
        rows.append(center + 0.05 * rng.standard_normal(5))  # output
        sources.append(src); kinds.append(0)
        rows.append(center)                                   # reference
        sources.append(src); kinds.append(1)
        for _ in range(n_p):
            rows.append(center + 0.3 * rng.standard_normal(5))
            sources.append(src); kinds.append(2)
    scores = score_frame(np.array(rows), np.array(sources), np.array(kinds))
    assert [s.source for s in scores] == [0, 1]
    for s in scores:
        assert 0.0 <= s.ps <= 1.0
        assert s.pm is None or 0.0 <= s.pm <= 1.0
        assert s.nearest_foreign != s.source
