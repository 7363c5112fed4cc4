import math

import numpy as np
import pytest
from scipy.stats import norm

from mapss.bounds import (
    CorrelationBound,
    SchurSplit,
    _corner_max,
    combine_scenario,
    pcc_gradient,
    pesq_logistic_slope,
    pm_frame_bound,
    propagate_correlation,
    propagate_utterance,
    ps_frame_bound,
    schur_residual,
    truncation_stats,
)
from mapss.errors import EmptyFrameSet, ZeroVariance
from mapss.manifold import SpectralEmbedding, build_graph, decompose
from mapss.measures import ClusterStatsPM, fit_gamma, squared_distance_set
from mapss.special import regularized_upper_gamma


def _embedding(eigenvalues, stationary=None, t=1):
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    n = eigenvalues.size + 1
    stationary = (np.full(n, 1.0 / n) if stationary is None
                  else np.asarray(stationary))
    return SpectralEmbedding(eigenvalues=eigenvalues,
                             eigenvectors=np.zeros((n, eigenvalues.size)),
                             stationary=stationary, t=t, tau=0.99,
                             dim=eigenvalues.size)


# --- truncation ---------------------------------------------------------------

def test_truncation_expected_error_arithmetic():
    se = _embedding([0.9, 0.5, 0.1])
    tb = truncation_stats(se, d=1)
    assert tb.expected_error == pytest.approx(math.sqrt(0.25 + 0.01), abs=1e-12)
    assert tb.m == 2
    assert truncation_stats(se, d=3).expected_error == 0.0
    assert truncation_stats(se, d=3).tail_bound(0.05) == 0.0


def test_truncation_tail_formula():
    se = _embedding([0.8, 0.4, 0.2, 0.1], t=2)
    tb = truncation_stats(se, d=2, c=1.5)
    k_const = (1.0 / 5.0) ** -0.5 / math.sqrt(math.log(2.0))
    expected = 1.5 * 0.2**2 * k_const * (2 + math.sqrt(2 * math.log(1 / 0.1)))
    assert tb.tail_bound(0.1) == pytest.approx(expected, rel=1e-12)
    assert tb.expected_error <= truncation_stats(se, d=1).expected_error


def test_truncation_monte_carlo_matches_expectation(rng):
    # E_pi[T(x)] must equal the discarded eigenvalue powers by the
    # orthonormality of the eigenvectors under the stationary measure.
    g = build_graph(rng.standard_normal((30, 10)))
    se = decompose(g, t=1, tau=0.99)
    d = se.dim
    tail = se.eigenvalues[d:] ** 2
    expected = tail.sum()
    items = rng.choice(g.n_items, size=100_000, p=g.stationary)
    t_draws = ((se.eigenvectors[items, d:] ** 2) * tail).sum(axis=1)
    se_mc = t_draws.std(ddof=1) / math.sqrt(t_draws.size)
    assert abs(t_draws.mean() - expected) <= 3.0 * se_mc


# --- Schur residuals ------------------------------------------------------------

def test_schur_identity_full_inverse_oracle(rng):
    for _ in range(20):
        n = int(rng.integers(4, 12))
        d = int(rng.integers(1, n))
        a = rng.standard_normal((n, n))
        sigma = a @ a.T
        delta = rng.standard_normal(n)
        eps = 1e-6
        full = float(delta @ np.linalg.solve(sigma + eps * np.eye(n), delta))
        trunc = float(delta[:d] @ np.linalg.solve(sigma[:d, :d] + eps * np.eye(d),
                                                  delta[:d]))
        res = schur_residual(delta, sigma, d, eps)
        assert abs(full - (trunc + res.energy)) <= 1e-8 * abs(full)


def test_schur_block_diagonal_case():
    sigma = np.diag([2.0, 3.0, 0.5, 0.25])
    delta = np.array([1.0, -1.0, 2.0, 0.5])
    res = schur_residual(delta, sigma, 2, eps=1e-12)
    np.testing.assert_allclose(res.residual, delta[2:], atol=1e-12)
    np.testing.assert_allclose(res.complement, sigma[2:, 2:] + 1e-12 * np.eye(2),
                               atol=1e-15)
    expected = 2.0**2 / 0.5 + 0.5**2 / 0.25
    assert res.energy == pytest.approx(expected, rel=1e-9)


def test_schur_zero_cases():
    sigma = np.diag([1.0, 2.0, 3.0])
    res = schur_residual(np.array([1.0, 2.0, 0.0]), sigma, 2, eps=1e-9)
    assert res.energy == pytest.approx(0.0, abs=1e-12)
    res_full = schur_residual(np.ones(3), sigma, 3)
    assert res_full.energy == 0.0 and res_full.residual.size == 0


def test_schur_batched_energies_match(rng):
    a = rng.standard_normal((9, 9))
    sigma = a @ a.T
    split = SchurSplit(sigma, 5, eps=1e-6)
    deltas = rng.standard_normal((7, 9))
    batched = split.energies(deltas)
    single = [split.residual(row).energy for row in deltas]
    np.testing.assert_allclose(batched, single, rtol=1e-12)


# --- separation-score frame bound -------------------------------------------------

def _cluster_members(rng, center, n, dim, scale=0.3):
    return center + scale * rng.standard_normal((n, dim))


def test_ps_bound_zero_residuals(rng):
    # Members and output confined to the retained coordinates: no residual.
    d, extra = 3, 4
    dim = d + extra
    members = {}
    for j, offset in ((0, 0.0), (1, 2.0)):
        m = np.zeros((30, dim))
        m[:, :d] = _cluster_members(rng, offset, 30, d)
        members[j] = m
    out = np.zeros(dim)
    out[:d] = 0.3
    fb = ps_frame_bound(out, members, 0, 1, a_hat=0.5, b_hat=2.0, d=d)
    assert fb.radius == pytest.approx(0.0, abs=1e-10)
    assert fb.half_width > 0.0
    assert fb.valid


def test_ps_bound_symmetric_residual_formula(rng):
    # Mirror-image clusters around the output give equal residual energies,
    # collapsing the radius to sqrt(energy)/(a+b).
    dim, d = 6, 3
    base = _cluster_members(rng, 0.0, 25, dim)
    out = np.full(dim, 0.7)
    members = {0: base + 1.0, 1: 2 * out - (base + 1.0)}
    a = b = 1.3
    fb = ps_frame_bound(out, members, 0, 1, a_hat=a, b_hat=b, d=d)
    e_own = fb.components["residual_energy_own"]
    e_foreign = fb.components["residual_energy_foreign"]
    assert e_own == pytest.approx(e_foreign, rel=1e-9)
    assert fb.radius == pytest.approx(math.sqrt(e_own) / (a + b), rel=1e-9)


def test_ps_bound_nonnegative_and_delta_checked(rng):
    members = {0: _cluster_members(rng, 0.0, 20, 5),
               1: _cluster_members(rng, 3.0, 20, 5)}
    fb = ps_frame_bound(np.zeros(5), members, 0, 1, 0.8, 2.5, d=3)
    assert fb.radius >= 0.0 and fb.half_width >= 0.0
    with pytest.raises(ValueError):
        ps_frame_bound(np.zeros(5), members, 0, 1, 0.8, 2.5, d=3, delta=0.0)


# --- match-score frame bound -------------------------------------------------------

def test_corner_max_closed_form():
    # Only the distance arm varies: corners at ln2 * (1 +- 1/2) under
    # Q(1, x) = exp(-x) give max(|2^-1.5 - 1/2|, |2^-0.5 - 1/2|).
    ln2 = math.log(2.0)
    got = _corner_max(0.5, 1.0, 1.0, ln2, 0.0, 0.0, 0.5 * ln2)
    expected = max(abs(2.0**-1.5 - 0.5), abs(2.0**-0.5 - 0.5))
    assert got == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(2.0**-0.5 - 0.5, abs=1e-12)


def test_corner_max_dominates_grid_scan(rng):
    # Corner maximization equals the box supremum under per-variable
    # monotonicity; a 1000-point grid scan can never beat it.
    for _ in range(20):
        k = float(rng.uniform(0.5, 8.0))
        theta = float(rng.uniform(0.2, 3.0))
        a = float(rng.uniform(0.1, 10.0))
        dk, dtheta, da = (float(rng.uniform(0, 0.5)) * k,
                          float(rng.uniform(0, 0.5)) * theta,
                          float(rng.uniform(0, 0.5)) * a)
        center = regularized_upper_gamma(k, a / theta)
        corner = _corner_max(center, k, theta, a, dk, dtheta, da)
        grid = 0.0
        for kc in np.linspace(k - dk, k + dk, 10):
            for tc in np.linspace(theta - dtheta, theta + dtheta, 10):
                for ac in np.linspace(a - da, a + da, 10):
                    grid = max(grid, abs(regularized_upper_gamma(kc, ac / tc)
                                         - center))
        assert corner >= grid - 1e-9


def _pm_world(rng, dim=7, d=5, n_p=40):
    ref = rng.standard_normal(dim)
    dists = ref + rng.standard_normal((n_p, dim)) * 0.4
    out = ref + 0.5 * rng.standard_normal(dim)
    cluster = ClusterStatsPM.from_members(ref[:d], dists[:, :d])
    g_set = squared_distance_set(cluster, dists[:, :d])
    fit = fit_gamma(g_set)
    import scipy.linalg
    delta = out[:d] - ref[:d]
    a_sq = float(delta @ scipy.linalg.solve(
        cluster.covariance + 1e-6 * np.eye(d), delta))
    return out, ref, dists, fit, g_set, a_sq


def test_pm_bound_zero_width_box(rng):
    out, ref, dists, fit, g_set, a_sq = _pm_world(rng)
    d = dists.shape[1]  # full split: no truncation residuals
    fb = pm_frame_bound(out, ref, dists, fit, g_set, a_sq, d=d)
    assert fb.radius == pytest.approx(0.0, abs=1e-12)
    assert fb.half_width >= 0.0


def test_pm_bound_basic_properties(rng):
    out, ref, dists, fit, g_set, a_sq = _pm_world(rng)
    fb = pm_frame_bound(out, ref, dists, fit, g_set, a_sq, d=5)
    assert fb.radius >= 0.0 and fb.half_width >= 0.0
    dk, dtheta, da = fb.components["local_box"]
    assert dk <= 0.5 * fit.shape + 1e-12
    assert dtheta <= 0.5 * fit.scale + 1e-12
    assert da <= 0.5 * a_sq + 1e-12
    assert fb.valid == (fb.radius <= 1.0)


def test_pm_half_width_shrinks_with_bank_size():
    # Statistical trend: larger banks concentrate the moment estimates. The
    # concentration widths assume bounded distances, so the synthetic
    # distortions are drawn from bounded support.
    medians = []
    for n_p in (32, 512, 8192):
        widths = []
        for seed in range(20):
            local = np.random.default_rng(31 * n_p + seed)
            ref = local.standard_normal(2)
            dists = ref + local.uniform(-1, 1, size=(n_p, 2))
            cluster = ClusterStatsPM.from_members(ref, dists)
            g_set = squared_distance_set(cluster, dists)
            fit = fit_gamma(g_set)
            a_sq = float(np.median(g_set))
            fb = pm_frame_bound(ref + 0.3, ref, dists, fit, g_set, a_sq, d=2)
            widths.append(fb.half_width)
        medians.append(np.median(widths))
    assert medians[0] > medians[1] > medians[2]


# --- utterance propagation ----------------------------------------------------------

def test_propagate_average_constant_radius():
    b, h = propagate_utterance([0.2] * 10, [0.1] * 10, "average", 0.95)
    assert b == pytest.approx(0.2, abs=1e-15)
    z = norm.ppf(0.975)
    expected_h = z * math.sqrt(5.0) / math.sqrt(10.0) * (0.1 / z)
    assert h == pytest.approx(expected_h, rel=1e-12)


def test_propagate_average_gap_inflation():
    _, h0 = propagate_utterance([0.0] * 25, [0.1] * 25, "average", 0.95, gap=0)
    _, h4 = propagate_utterance([0.0] * 25, [0.1] * 25, "average", 0.95, gap=4)
    assert h4 / h0 == pytest.approx(math.sqrt(5.0), rel=1e-12)


def test_propagate_pesq_no_overlap_factor():
    # window == hop -> ceil(W/H) = 1
    b1, h1 = propagate_utterance([0.1] * 60, [0.1] * 60, "pesq", 0.95,
                                 window=10, hop=10, pooled_input=0.5)
    b2, h2 = propagate_utterance([0.1] * 60, [0.1] * 60, "pesq", 0.95,
                                 window=10, hop=5, pooled_input=0.5)
    assert b2 == pytest.approx(2.0 * b1 * math.sqrt(5.0 / 10.0), rel=1e-12)
    assert pesq_logistic_slope(3.8224 / 1.3669) == pytest.approx(1.3669, rel=1e-12)


def test_propagate_empty_raises():
    with pytest.raises(EmptyFrameSet):
        propagate_utterance([], [], "average", 0.95)


# --- correlation propagation ----------------------------------------------------------

def test_correlation_zero_bounds_give_zero():
    rng = np.random.default_rng(0)
    v = rng.uniform(0, 1, size=6)
    mos = rng.uniform(0, 100, size=6)
    for metric in ("pcc", "srcc"):
        cb = propagate_correlation(v, np.zeros(6), np.zeros(6), mos, metric)
        assert cb.radius == pytest.approx(0.0, abs=1e-12)
        assert cb.half_width == pytest.approx(0.0, abs=1e-12)


def test_srcc_half_width_zero_when_jitter_below_gaps():
    v = np.array([0.1, 0.3, 0.5, 0.7, 0.9])
    mos = np.array([10.0, 30.0, 50.0, 70.0, 90.0])
    tiny = np.full(5, 1e-9)
    cb = propagate_correlation(v, tiny, tiny, mos, "srcc", mc_draws=2000)
    assert cb.half_width == 0.0


def test_pcc_gradient_matches_finite_difference_oracle():
    rng = np.random.default_rng(9)
    from mapss.evalreport import pcc
    for _ in range(5):
        v = rng.uniform(0, 1, size=7)
        mos = rng.uniform(0, 100, size=7)
        grad = pcc_gradient(v, mos)
        h = 1e-6
        numeric = np.zeros(7)
        for i in range(7):
            step = np.zeros(7)
            step[i] = h
            numeric[i] = (pcc(v + step, mos) - pcc(v - step, mos)) / (2 * h)
        np.testing.assert_allclose(grad, numeric, rtol=1e-5, atol=1e-9)


def test_pcc_gradient_orthogonal_when_perfectly_correlated():
    mos = np.array([5.0, 15.0, 40.0, 60.0, 80.0])
    v = 0.01 * mos + 0.2  # exactly affine in the ratings
    grad = pcc_gradient(v, mos)
    centered = v - v.mean()
    assert abs(grad @ centered) <= 1e-10 * np.linalg.norm(centered)
    h = 1e-7
    from mapss.evalreport import pcc
    numeric = np.array([
        (pcc(v + h * np.eye(5)[i], mos) - pcc(v - h * np.eye(5)[i], mos)) / (2 * h)
        for i in range(5)])
    np.testing.assert_allclose(grad, numeric, atol=1e-6)


def test_correlation_validation():
    with pytest.raises(ValueError):
        propagate_correlation([1, 2], [0, 0], [0, 0], [1, 2], "pcc")
    with pytest.raises(ZeroVariance):
        propagate_correlation([1.0, 1.0, 1.0], [0] * 3, [0] * 3,
                              [1, 2, 3], "pcc")


def test_scenario_combination_arithmetic():
    z = norm.ppf(0.975)
    mk = lambda b, h: CorrelationBound("utterance", "pcc", b, h, 0.95, z)
    bounds = {"t1": [mk(0.1, 0.2), mk(0.3, 0.4)], "t2": [mk(0.2, 0.2)]}
    combined = combine_scenario(bounds, "pcc", rho_within_trial=0.0)
    assert combined.radius == pytest.approx((0.1 + 0.3 + 0.2) / 3)
    expected_h = z * math.sqrt((0.2 / z) ** 2 + (0.4 / z) ** 2
                               + (0.2 / z) ** 2) / 3
    assert combined.half_width == pytest.approx(expected_h, rel=1e-12)
    # within-trial correlation only adds variance
    rho = combine_scenario(bounds, "pcc", rho_within_trial=0.5)
    assert rho.half_width > combined.half_width
    with pytest.raises(EmptyFrameSet):
        combine_scenario({}, "pcc")


def test_ps_bound_bartlett_flag(rng):
    # The lag-sum effective-sample-size estimator is available behind a flag
    # and yields a finite, positive half-width.
    members = {0: _cluster_members(rng, 0.0, 24, 5),
               1: _cluster_members(rng, 3.0, 24, 5)}
    fb_factor = ps_frame_bound(np.zeros(5), members, 0, 1, 0.8, 2.5, d=3)
    fb_bartlett = ps_frame_bound(np.zeros(5), members, 0, 1, 0.8, 2.5, d=3,
                                 bartlett_n_eff=True)
    assert fb_bartlett.half_width > 0.0
    assert math.isfinite(fb_bartlett.half_width)
    # iid members give weak lag correlations, so the estimates stay same-order
    ratio = fb_bartlett.half_width / fb_factor.half_width
    assert 0.2 < ratio < 5.0
