"""Per-source perceptual clusters and the frame-level separation/match scores.

Each active source contributes a cluster of embedded points: its reference
plus the embeddings of the distortion bank. The system output embedding is
always excluded from the statistics it is measured against. The separation
score compares Mahalanobis distances to the attributed and nearest foreign
cluster; the match score is the Gamma upper-tail probability of the output's
squared distance to its reference-centered cluster.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.stats import kstwo

from .errors import DegenerateMoments, SingleSource, SolveFailure
from .special import gamma_cdf, regularized_upper_gamma, upper_gamma_dx

DEFAULT_EPS = 1e-6


def _factor(sigma: np.ndarray, eps: float):
    """Cholesky factor of (sigma + eps I); raise SolveFailure if singular."""
    reg = sigma + eps * np.eye(sigma.shape[0])
    try:
        return scipy.linalg.cho_factor(reg, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise SolveFailure("regularized covariance is not positive definite") from exc


def _regularized_solve(sigma: np.ndarray, rhs: np.ndarray, eps: float) -> np.ndarray:
    """Solve (sigma + eps I) z = rhs via Cholesky; raise SolveFailure if singular."""
    return scipy.linalg.cho_solve(_factor(sigma, eps), rhs, check_finite=False)


def mahalanobis(x: np.ndarray, mu: np.ndarray, sigma: np.ndarray,
                eps: float = DEFAULT_EPS) -> float:
    """Mahalanobis distance sqrt((x-mu)^T (sigma + eps I)^-1 (x-mu))."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if x.shape != mu.shape or sigma.shape != (x.size, x.size):
        raise ValueError("dimension mismatch between point, center and covariance")
    if eps <= 0:
        raise ValueError("eps must be positive")
    delta = x - mu
    return float(np.sqrt(max(delta @ _regularized_solve(sigma, delta, eps), 0.0)))


@dataclass(frozen=True)
class ClusterStatsPS:
    """Centroid and unbiased covariance of one cluster (output excluded)."""

    centroid: np.ndarray
    covariance: np.ndarray
    n_members: int

    @classmethod
    def from_members(cls, members: np.ndarray) -> "ClusterStatsPS":
        members = np.asarray(members, dtype=np.float64)
        if members.ndim != 2 or members.shape[0] < 2:
            raise ValueError("cluster needs at least two member embeddings")
        mu = members.mean(axis=0)
        centered = members - mu
        cov = centered.T @ centered / (members.shape[0] - 1)
        return cls(centroid=mu, covariance=cov, n_members=members.shape[0])

    def solver(self, eps: float):
        """Cached Cholesky factor of the regularized covariance."""
        cache = getattr(self, "_solvers", None)
        if cache is None:
            cache = {}
            object.__setattr__(self, "_solvers", cache)
        if eps not in cache:
            cache[eps] = _factor(self.covariance, eps)
        return cache[eps]


@dataclass(frozen=True)
class ClusterStatsPM:
    """Reference embedding and reference-centered covariance of the distortions."""

    reference: np.ndarray
    covariance: np.ndarray
    n_members: int  # number of distortions

    @classmethod
    def from_members(cls, reference: np.ndarray,
                     distortions: np.ndarray) -> "ClusterStatsPM":
        reference = np.asarray(reference, dtype=np.float64)
        distortions = np.asarray(distortions, dtype=np.float64)
        n_p = distortions.shape[0]
        if n_p < 2:
            raise ValueError("need at least two distortions for the unbiased covariance")
        centered = distortions - reference
        cov = centered.T @ centered / (n_p - 1)
        return cls(reference=reference, covariance=cov, n_members=n_p)


@dataclass(frozen=True)
class GammaFit:
    """Moment-matched Gamma parameters of the squared-distance set."""

    shape: float
    scale: float
    mean: float
    variance: float  # unbiased


@dataclass
class FrameScores:
    """Scores and intermediates of one (frame, source) pair."""

    source: int
    ps: float | None
    a_hat: float | None
    b_hat: float | None
    nearest_foreign: int | None
    pm: float | None = None
    a_sq_hat: float | None = None
    gamma: GammaFit | None = None
    ks_statistic: float | None = None
    ks_pass: bool | None = None
    extras: dict = field(default_factory=dict)


def compute_ps(output: np.ndarray, clusters: dict[int, ClusterStatsPS], source: int,
               eps: float = DEFAULT_EPS) -> tuple[float, float, float, int]:
    """Separation score of one output against the per-source clusters.

    Returns ``(ps, a_hat, b_hat, nearest_foreign)``. Ties in the nearest
    foreign cluster break toward the smallest source index.
    """
    if source not in clusters:
        raise KeyError(f"no cluster for source {source}")
    foreign = sorted(j for j in clusters if j != source)
    if not foreign:
        raise SingleSource("separation needs at least two clusters")

    def distance_to(stats: ClusterStatsPS) -> float:
        delta = np.asarray(output, dtype=np.float64) - stats.centroid
        return float(np.sqrt(max(
            delta @ scipy.linalg.cho_solve(stats.solver(eps), delta, check_finite=False), 0.0)))

    a_hat = distance_to(clusters[source])
    b_hat = np.inf
    j_star = foreign[0]
    for j in foreign:
        d = distance_to(clusters[j])
        if d < b_hat:
            b_hat = d
            j_star = j
    if a_hat + b_hat <= 0.0:
        # Output coincides with every centroid of a degenerate frame.
        raise ValueError("attributed plus foreign distance is zero")
    ps = 1.0 - a_hat / (a_hat + b_hat)
    return float(ps), float(a_hat), float(b_hat), j_star


def squared_distance_set(cluster: ClusterStatsPM, distortions: np.ndarray,
                         eps: float = DEFAULT_EPS) -> np.ndarray:
    """Squared Mahalanobis distance of each distortion to its reference."""
    distortions = np.asarray(distortions, dtype=np.float64)
    centered = distortions - cluster.reference
    solved = _regularized_solve(cluster.covariance, centered.T, eps)
    return np.maximum(np.einsum("ij,ji->i", centered, solved), 0.0)


def fit_gamma(distances_sq: np.ndarray) -> GammaFit:
    """Moment-match a Gamma distribution to squared distances.

    Shape is mean^2/variance and scale variance/mean, from the sample mean and
    unbiased variance. Requires at least two values and strictly positive
    moments; a variance below 1e-12 of the squared mean means the distances
    are numerically equidistant.
    """
    g = np.asarray(distances_sq, dtype=np.float64)
    if g.size < 2:
        raise DegenerateMoments("need at least two squared distances")
    mean = float(g.mean())
    var = float(g.var(ddof=1))
    if mean <= 0.0 or var <= 0.0:
        raise DegenerateMoments("nonpositive moments: distances are degenerate")
    if var < 1e-12 * mean * mean:
        raise DegenerateMoments("distances are numerically equidistant")
    return GammaFit(shape=mean * mean / var, scale=var / mean, mean=mean, variance=var)


def compute_pm(fit: GammaFit, a_sq_hat: float) -> float:
    """Match score: Gamma upper-tail probability of the output's squared distance."""
    if a_sq_hat < 0.0:
        raise ValueError("squared distance must be nonnegative")
    return regularized_upper_gamma(fit.shape, a_sq_hat / fit.scale)


def ks_gamma_diagnostic(fit: GammaFit, distances_sq: np.ndarray,
                        alpha: float = 0.05) -> tuple[float, bool, bool]:
    """One-sample Kolmogorov-Smirnov check of the Gamma fit.

    Returns ``(statistic, passed, low_power)``. Advisory only: a failed test
    never blocks scoring. Fewer than five samples are flagged low-power.
    """
    g = np.sort(np.asarray(distances_sq, dtype=np.float64))
    n = g.size
    if n == 0:
        raise ValueError("empty distance set")
    cdf = np.array([gamma_cdf(x, fit.shape, fit.scale) for x in g])
    grid = np.arange(1, n + 1) / n
    stat = float(np.max(np.maximum(grid - cdf, cdf - (grid - 1.0 / n))))
    p_value = float(kstwo.sf(stat, n))
    return stat, p_value > alpha, n < 5


def score_frame(embedded: np.ndarray, row_sources: np.ndarray, row_kinds: np.ndarray,
                eps: float = DEFAULT_EPS, with_ks: bool = True,
                measures: tuple = ("ps", "pm")) -> list[FrameScores]:
    """Score every active source of one embedded frame.

    ``embedded`` holds the truncated coordinates row-per-item; ``row_sources``
    and ``row_kinds`` label each row (kind 0 = output, 1 = reference,
    2 = distortion). Degenerate match fits are reported as ``pm=None``.
    ``measures`` selects which scores to compute when the two measures run on
    differently parameterized banks.
    """
    sources = sorted(set(int(s) for s in row_sources))
    ps_clusters: dict[int, ClusterStatsPS] = {}
    pm_inputs: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    for i in sources:
        mask = row_sources == i
        ref = embedded[mask & (row_kinds == 1)]
        dist = embedded[mask & (row_kinds == 2)]
        out = embedded[mask & (row_kinds == 0)]
        if ref.shape[0] != 1 or out.shape[0] != 1:
            raise ValueError(f"source {i} must have exactly one reference and one output")
        if "ps" in measures:
            ps_clusters[i] = ClusterStatsPS.from_members(np.vstack([ref, dist]))
        pm_inputs[i] = (out[0], ref[0], dist)

    results = []
    for i in sources:
        out, ref, dist = pm_inputs[i]
        scores = FrameScores(source=i, ps=None, a_hat=None, b_hat=None,
                             nearest_foreign=None)
        if "ps" in measures:
            ps, a_hat, b_hat, j_star = compute_ps(out, ps_clusters, i, eps)
            scores.ps, scores.a_hat, scores.b_hat = ps, a_hat, b_hat
            scores.nearest_foreign = j_star
        if "pm" in measures:
            try:
                pm_cluster = ClusterStatsPM.from_members(ref, dist)
                g_set = squared_distance_set(pm_cluster, dist, eps)
                fit = fit_gamma(g_set)
                delta = out - ref
                a_sq = float(delta @ _regularized_solve(pm_cluster.covariance,
                                                        delta, eps))
                scores.pm = compute_pm(fit, max(a_sq, 0.0))
                scores.a_sq_hat = max(a_sq, 0.0)
                scores.gamma = fit
                if with_ks:
                    stat, passed, _ = ks_gamma_diagnostic(fit, g_set)
                    scores.ks_statistic = stat
                    scores.ks_pass = passed
            except (DegenerateMoments, SolveFailure):
                scores.pm = None
        results.append(scores)
    return results


# --- gradients in the embedded coordinates -----------------------------------
#
# Both measures are differentiable in the output's embedded coordinates away
# from the switching set of the nearest foreign cluster. Exposed for
# verification; nothing in the pipeline consumes them.

def ps_gradient(output: np.ndarray, clusters: dict[int, ClusterStatsPS], source: int,
                eps: float = DEFAULT_EPS) -> np.ndarray:
    """Gradient of the separation score w.r.t. the output embedding."""
    ps, a_hat, b_hat, j_star = compute_ps(output, clusters, source, eps)
    own, near = clusters[source], clusters[j_star]
    grad_a = _regularized_solve(own.covariance, output - own.centroid, eps) / a_hat
    grad_b = _regularized_solve(near.covariance, output - near.centroid, eps) / b_hat
    denom = (a_hat + b_hat) ** 2
    return (-b_hat / denom) * grad_a + (a_hat / denom) * grad_b


def pm_gradient(output: np.ndarray, cluster: ClusterStatsPM, fit: GammaFit,
                eps: float = DEFAULT_EPS) -> np.ndarray:
    """Gradient of the match score w.r.t. the output embedding."""
    delta = output - cluster.reference
    solved = _regularized_solve(cluster.covariance, delta, eps)
    a_sq = float(delta @ solved)
    dq_dx = upper_gamma_dx(fit.shape, a_sq / fit.scale)
    return (dq_dx / fit.scale) * 2.0 * solved
