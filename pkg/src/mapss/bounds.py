"""Deterministic error radii and probabilistic half-widths for the measures.

Three layers are covered:

* spectral truncation of the diffusion embedding (expected error and a
  sub-Gaussian tail under the stationary distribution);
* frame-level radii and finite-sample confidence half-widths for both
  measures, built from Schur-complement residuals, effective-sample-size
  concentration widths and box-corner maximization of the Gamma tail;
* propagation of frame bounds to utterance aggregates and onward to the
  reported correlation coefficients.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.stats import norm

from .errors import ComplementNotPD, EmptyFrameSet, ZeroVariance
from .manifold import SpectralEmbedding
from .measures import GammaFit
from .special import regularized_upper_gamma, upper_gamma_dx

DEFAULT_DELTA = 0.05
DEFAULT_EPS = 1e-6
EIGEN_FLOOR_RATIO = 0.05      # relative floor added before taking the minimal eigenvalue
N_EFF_FACTOR = 0.7            # global effective-sample-size deflation
DECORRELATION_GAP = 4         # frames further apart are treated as independent
PESQ_SLOPE_CAP = 1.3669


# --- truncation (stationary-measure tail) ------------------------------------

@dataclass(frozen=True)
class TruncationBound:
    """Expected truncation error and its high-probability tail."""

    expected_error: float
    lambda_next_t: float      # discarded leading eigenvalue, raised to t
    k_const: float            # pi_min^(-1/2) / sqrt(ln 2)
    m: int                    # number of discarded coordinates
    c: float                  # configurable universal constant

    def tail_bound(self, delta: float) -> float:
        if not 0.0 < delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.m == 0:
            return 0.0
        return self.c * self.lambda_next_t * self.k_const * (
            self.m + math.sqrt(self.m * math.log(1.0 / delta)))


def truncation_stats(se: SpectralEmbedding, d: int | None = None,
                     c: float = 1.0) -> TruncationBound:
    """Truncation-error statistics after keeping the first ``d`` coordinates.

    The expectation under the stationary distribution is the root of the
    discarded eigenvalue powers; the tail combines the sub-Gaussian constant
    of the bounded eigenvector coordinates with the discarded dimension count.
    """
    d = se.dim if d is None else d
    if not 1 <= d <= se.n_kept:
        raise ValueError(f"d must lie in 1..{se.n_kept}, got {d}")
    tail_eigs = se.eigenvalues[d:]
    expected = float(np.sqrt(np.sum(tail_eigs ** (2 * se.t))))
    pi_min = float(se.stationary.min())
    k_const = pi_min ** -0.5 / math.sqrt(math.log(2.0))
    lam_next = float(tail_eigs[0] ** se.t) if tail_eigs.size else 0.0
    return TruncationBound(expected_error=expected, lambda_next_t=lam_next,
                           k_const=k_const, m=int(tail_eigs.size), c=float(c))


# --- Schur residuals ----------------------------------------------------------

@dataclass(frozen=True)
class SchurResidual:
    """Residual of a full-space Mahalanobis distance after truncation.

    ``energy`` is r^T S^-1 r, the exact gap between the full and truncated
    squared distances when both use the same diagonal regularization.
    """

    residual: np.ndarray
    complement: np.ndarray
    energy: float


class SchurSplit:
    """Factored Schur split of one regularized covariance, reusable across
    many difference vectors of the same cluster."""

    def __init__(self, sigma_full: np.ndarray, d: int, eps: float = DEFAULT_EPS):
        n = sigma_full.shape[0]
        if sigma_full.shape != (n, n):
            raise ValueError("covariance must be square")
        if not 0 <= d <= n:
            raise ValueError(f"split dimension must lie in 0..{n}, got {d}")
        self.d, self.m, self.eps = d, n - d, eps
        if self.m == 0:
            self.complement = np.zeros((0, 0))
            return
        coupling = sigma_full[:d, d:]
        bottom = sigma_full[d:, d:] + eps * np.eye(self.m)
        if d > 0:
            top = sigma_full[:d, :d] + eps * np.eye(d)
            try:
                self._cho_top = scipy.linalg.cho_factor(top, lower=True, check_finite=False)
            except scipy.linalg.LinAlgError as exc:
                raise ComplementNotPD("retained block is not positive definite") from exc
            self._coupling = coupling
            complement = bottom - coupling.T @ scipy.linalg.cho_solve(
                self._cho_top, coupling, check_finite=False)
        else:
            self._cho_top = None
            self._coupling = coupling
            complement = bottom
        self.complement = 0.5 * (complement + complement.T)
        try:
            self._cho_s = scipy.linalg.cho_factor(self.complement, lower=True, check_finite=False)
        except scipy.linalg.LinAlgError as exc:
            raise ComplementNotPD("Schur complement is not positive definite") from exc

    def residual(self, delta_full: np.ndarray) -> SchurResidual:
        delta_full = np.asarray(delta_full, dtype=np.float64)
        if delta_full.size != self.d + self.m:
            raise ValueError("difference vector has the wrong dimension")
        if self.m == 0:
            return SchurResidual(residual=np.zeros(0), complement=self.complement,
                                 energy=0.0)
        delta_d, delta_perp = delta_full[: self.d], delta_full[self.d:]
        if self.d > 0:
            r = delta_perp - self._coupling.T @ scipy.linalg.cho_solve(
                self._cho_top, delta_d, check_finite=False)
        else:
            r = delta_perp
        energy = float(r @ scipy.linalg.cho_solve(self._cho_s, r, check_finite=False))
        return SchurResidual(residual=r, complement=self.complement,
                             energy=max(energy, 0.0))

    def energies(self, deltas_full: np.ndarray) -> np.ndarray:
        """Residual energies of many difference vectors at once (rows)."""
        deltas_full = np.atleast_2d(np.asarray(deltas_full, dtype=np.float64))
        if self.m == 0:
            return np.zeros(deltas_full.shape[0])
        delta_d = deltas_full[:, : self.d]
        delta_perp = deltas_full[:, self.d:]
        if self.d > 0:
            r = delta_perp - (scipy.linalg.cho_solve(self._cho_top, delta_d.T, check_finite=False).T
                              @ self._coupling)
        else:
            r = delta_perp
        solved = scipy.linalg.cho_solve(self._cho_s, r.T, check_finite=False)
        return np.maximum(np.einsum("ij,ji->i", r, solved), 0.0)


def schur_residual(delta_full: np.ndarray, sigma_full: np.ndarray, d: int,
                   eps: float = DEFAULT_EPS) -> SchurResidual:
    """Schur split of a regularized covariance at dimension ``d``.

    Satisfies exactly (in exact arithmetic):
    ``delta^T (Sigma + eps I)^-1 delta =
      delta_d^T (Sigma_d + eps I)^-1 delta_d + r^T S^-1 r``.
    """
    return SchurSplit(np.asarray(sigma_full, dtype=np.float64), d, eps).residual(
        delta_full)


# --- frame-level bounds -------------------------------------------------------

@dataclass
class FrameBound:
    """Deterministic radius plus probabilistic half-width of one frame score."""

    measure: str
    radius: float
    half_width: float
    delta: float
    valid: bool = True
    components: dict = field(default_factory=dict)


def _full_cluster_moments(members: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = members.mean(axis=0)
    centered = members - mu
    return mu, centered.T @ centered / (members.shape[0] - 1)


def _bartlett_n_eff(members_trunc: np.ndarray) -> float:
    """Effective sample size from the lag-sum of coordinate autocorrelations."""
    n = members_trunc.shape[0]
    if n < 3:
        return float(n)
    z975 = norm.ppf(0.975)
    lag_sum = 0.0
    for lag in range(1, n - 1):
        rhos = []
        for col in range(members_trunc.shape[1]):
            x = members_trunc[:, col]
            a, b = x[:-lag], x[lag:]
            sa, sb = a.std(), b.std()
            if sa > 0 and sb > 0:
                rhos.append(float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb)))
        rho = float(np.mean(rhos)) if rhos else 0.0
        if abs(rho) < z975 / math.sqrt(n - lag):
            lag_sum += rho
            break
        lag_sum += rho
    return float(min(max(n / (1.0 + 2.0 * lag_sum), 1.0), n))


def _ps_epsilon(dist_hat: float, lam_max: float, lam_min_floor: float,
                trace_ratio: float, delta_mu: float, delta_cov: float,
                c_cov: float, n_eff: float) -> tuple[float, dict]:
    """Finite-sample width of one measured Mahalanobis distance."""
    width_mu = math.sqrt(2.0 * lam_max * math.log(2.0 / delta_mu) / n_eff)
    width_cov = c_cov * lam_max * (trace_ratio / n_eff
                                   + (trace_ratio + math.log(2.0 / delta_cov)) / n_eff)
    eps_dist = (2.0 * math.sqrt(dist_hat) * width_mu * math.sqrt(lam_max / lam_min_floor)
                + dist_hat * width_cov / lam_max)
    parts = {"width_mu": width_mu, "width_cov": width_cov, "lam_max": lam_max,
             "lam_min_floor": lam_min_floor, "n_eff": n_eff}
    return eps_dist, parts


class ClusterGeometry:
    """Per-cluster quantities shared by every separation-score bound of one
    frame: full-space moments, a factored Schur split, and the truncated
    spectral summaries driving the concentration widths."""

    def __init__(self, members_full: np.ndarray, d: int,
                 eps: float = DEFAULT_EPS, eps_r: float = EIGEN_FLOOR_RATIO,
                 n_eff_factor: float = N_EFF_FACTOR,
                 bartlett_n_eff: bool = False):
        members = np.asarray(members_full, dtype=np.float64)
        self.mu_full, sigma_full = _full_cluster_moments(members)
        self.split = SchurSplit(sigma_full, d, eps)
        trunc = members[:, :d]
        self.n_eff = (_bartlett_n_eff(trunc) if bartlett_n_eff
                      else n_eff_factor * members.shape[0])
        mu_t = trunc.mean(axis=0)
        centered = trunc - mu_t
        sigma_t = centered.T @ centered / (trunc.shape[0] - 1)
        eigs = scipy.linalg.eigvalsh(sigma_t, check_finite=False)
        self.lam_max = max(float(eigs[-1]), 1e-30)
        self.lam_min_floor = float(eigs[0]) + eps_r * self.lam_max
        self.trace_ratio = float(np.sum(eigs)) / self.lam_max

    def residual_energy(self, point_full: np.ndarray) -> float:
        return float(self.split.energies(point_full - self.mu_full)[0])


def ps_frame_bound_from_geometry(output_full: np.ndarray,
                                 geometries: dict[int, ClusterGeometry],
                                 source: int, j_star: int,
                                 a_hat: float, b_hat: float,
                                 delta: float = DEFAULT_DELTA,
                                 c_cov: float = 1.0) -> FrameBound:
    """Separation-score bound given precomputed cluster geometry."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    denom = (a_hat + b_hat) ** 2
    energies = {j: geometries[j].residual_energy(output_full)
                for j in (source, j_star)}
    radius = (b_hat * math.sqrt(energies[source])
              + a_hat * math.sqrt(energies[j_star])) / denom

    delta_mu = delta_cov = delta / 2.0
    eps_terms, parts = {}, {}
    for j, dist_hat in ((source, a_hat), (j_star, b_hat)):
        geo = geometries[j]
        eps_terms[j], parts[j] = _ps_epsilon(
            dist_hat, geo.lam_max, geo.lam_min_floor, geo.trace_ratio,
            delta_mu, delta_cov, c_cov, geo.n_eff)

    lipschitz = math.sqrt(a_hat**2 + b_hat**2) / denom
    half_width = lipschitz * math.sqrt(eps_terms[source] + eps_terms[j_star])
    return FrameBound(
        measure="PS", radius=float(radius), half_width=float(half_width),
        delta=delta, valid=True,
        components={"residual_energy_own": energies[source],
                    "residual_energy_foreign": energies[j_star],
                    "eps_own": eps_terms[source], "eps_foreign": eps_terms[j_star],
                    "lipschitz": lipschitz, "widths": parts},
    )


def ps_frame_bound(output_full: np.ndarray,
                   cluster_members_full: dict[int, np.ndarray],
                   source: int, j_star: int, a_hat: float, b_hat: float,
                   d: int, delta: float = DEFAULT_DELTA, eps: float = DEFAULT_EPS,
                   c_cov: float = 1.0, eps_r: float = EIGEN_FLOOR_RATIO,
                   n_eff_factor: float = N_EFF_FACTOR,
                   bartlett_n_eff: bool = False) -> FrameBound:
    """Radius and half-width of one separation score.

    ``output_full`` and the cluster members live in the full (untruncated)
    embedding; ``a_hat``/``b_hat`` are the measured truncated distances. The
    confidence budget splits evenly between the centroid and covariance terms.
    """
    geometries = {
        j: ClusterGeometry(cluster_members_full[j], d, eps, eps_r,
                           n_eff_factor, bartlett_n_eff)
        for j in (source, j_star)
    }
    return ps_frame_bound_from_geometry(output_full, geometries, source, j_star,
                                        a_hat, b_hat, delta, c_cov)


def _q_on_closure(kc: float, theta_c: float, ac: float) -> float:
    """Q(k, a/theta) extended by its limits onto the k,theta >= 0 boundary."""
    if ac <= 0.0:
        return 1.0
    if kc <= 0.0 or theta_c <= 0.0:
        # Gamma(k) diverges as k -> 0+, and a/theta -> inf as theta -> 0+.
        return 0.0
    return regularized_upper_gamma(kc, ac / theta_c)


def _corner_max(center_pm: float, k: float, theta: float, a: float,
                dk: float, dtheta: float, da: float) -> float:
    """Largest tail-probability change over the eight box corners.

    Corners are intersected with the valid parameter region; the moment-
    matched parameters are positive by construction, so the true point always
    lies in that intersection, where the tail is monotone per variable.
    """
    worst = 0.0
    for kc in (max(k - dk, 0.0), k + dk):
        for tc in (max(theta - dtheta, 0.0), theta + dtheta):
            for ac in (max(a - da, 0.0), a + da):
                worst = max(worst, abs(_q_on_closure(kc, tc, ac) - center_pm))
    return worst


def _dk_sign_constant(k: float, theta: float, a: float,
                      dk: float, dtheta: float, da: float) -> bool:
    """Whether the shape-derivative of the tail keeps one sign on the box."""
    h = 1e-6
    signs = set()
    for kc in (max(k - dk, h * 2), k + dk):
        for tc in (max(theta - dtheta, 1e-12), theta + dtheta):
            for ac in (max(a - da, 0.0), a + da):
                x = ac / tc
                slope = (regularized_upper_gamma(kc + h, x)
                         - regularized_upper_gamma(kc - h, x))
                if slope:
                    signs.add(slope > 0)
    return len(signs) <= 1


def _gradient_norm_sup(k: float, theta: float, a: float,
                       dk: float, dtheta: float, da: float,
                       n_grid: int = 3) -> float:
    """Numerical sup of the gradient norm of Q(k, a/theta) over a box."""
    sup = 0.0
    h = 1e-5
    for kc in np.linspace(max(k - dk, 1e-6), k + dk, n_grid):
        for tc in np.linspace(max(theta - dtheta, 1e-9), theta + dtheta, n_grid):
            for ac in np.linspace(max(a - da, 1e-12), a + da, n_grid):
                x = ac / tc
                dq_dx = upper_gamma_dx(kc, x)
                dq_dk = (regularized_upper_gamma(kc + h, x)
                         - regularized_upper_gamma(max(kc - h, 1e-12), x)) / (2 * h)
                g = math.hypot(dq_dk, dq_dx * ac / tc**2, dq_dx / tc)
                if math.isfinite(g):
                    sup = max(sup, g)
    return sup


def pm_frame_bound(output_full: np.ndarray, reference_full: np.ndarray,
                   distortions_full: np.ndarray, fit: GammaFit,
                   g_set_trunc: np.ndarray, a_sq_hat: float, d: int,
                   delta: float = DEFAULT_DELTA, eps: float = DEFAULT_EPS,
                   c1: float = 1.0, c2: float = 1.0) -> FrameBound:
    """Radius and half-width of one match score.

    The radius maximizes the Gamma-tail change over the eight corners of the
    truncation box built from the Schur residual energies, falling back to a
    gradient bound when the box leaves the valid parameter region. The
    half-width does the same over the finite-sample box, whose widths are
    clamped to half their centers. Radii above 1 mark the frame invalid.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    distortions_full = np.asarray(distortions_full, dtype=np.float64)
    n_p = distortions_full.shape[0]
    centered = distortions_full - reference_full
    sigma_full = centered.T @ centered / (n_p - 1)

    split = SchurSplit(sigma_full, d, eps)
    energies = split.energies(centered)
    energy_out = float(split.energies(output_full - reference_full)[0])

    g_trunc = np.asarray(g_set_trunc, dtype=np.float64)
    mu_hat, var_hat = fit.mean, fit.variance
    g_full = g_trunc + energies
    mu_full, var_full = float(g_full.mean()), float(g_full.var(ddof=1))

    e_max = float(energies.max())
    ratio = n_p / (n_p - 1.0)
    dk_trunc = c1 * e_max * ratio * (mu_full + mu_hat) / var_hat
    dtheta_trunc = c2 * e_max * ratio * (var_full + var_hat) / mu_hat**2
    da_trunc = energy_out

    k_hat, theta_hat = fit.shape, fit.scale
    center_pm = regularized_upper_gamma(k_hat, a_sq_hat / theta_hat)
    corner_mode = _dk_sign_constant(k_hat, theta_hat, a_sq_hat,
                                    dk_trunc, dtheta_trunc, da_trunc)
    if corner_mode:
        radius = _corner_max(center_pm, k_hat, theta_hat, a_sq_hat,
                             dk_trunc, dtheta_trunc, da_trunc)
    else:
        sup = _gradient_norm_sup(k_hat, theta_hat, a_sq_hat,
                                 dk_trunc, dtheta_trunc, da_trunc)
        radius = sup * math.sqrt(dk_trunc**2 + dtheta_trunc**2 + da_trunc**2)
        if not math.isfinite(radius):
            radius = math.inf

    # Finite-sample box: moment concentration at delta/3 each.
    d3 = delta / 3.0
    r_max = float(g_trunc.max())
    log_term = math.log(2.0 / d3)
    width_mu = math.sqrt(2.0 * var_hat * log_term / n_p) + 3.0 * r_max * log_term / n_p
    width_sd = (math.sqrt(2.0 * r_max**2 * log_term / n_p)
                + 3.0 * r_max**2 * log_term / n_p)
    width_a = r_max * math.sqrt(log_term / n_p)

    sd_hat = math.sqrt(var_hat)
    dk = (2.0 * mu_hat / var_hat) * width_mu + (2.0 * mu_hat**2 / sd_hat**3) * width_sd
    dtheta = (var_hat / mu_hat**2) * width_mu + (2.0 * sd_hat / mu_hat) * width_sd
    dk = min(dk, 0.5 * k_hat)
    dtheta = min(dtheta, 0.5 * theta_hat)
    da = min(width_a, 0.5 * a_sq_hat)
    half_width = _corner_max(center_pm, k_hat, theta_hat, a_sq_hat, dk, dtheta, da)

    return FrameBound(
        measure="PM", radius=float(radius), half_width=float(half_width),
        delta=delta, valid=bool(radius <= 1.0),
        components={"residual_energies": energies.tolist(),
                    "residual_energy_out": energy_out,
                    "trunc_box": (dk_trunc, dtheta_trunc, da_trunc),
                    "local_box": (dk, dtheta, da),
                    "r_max": r_max, "corner_mode": corner_mode},
    )


# --- propagation to utterance and correlation level ---------------------------

def pesq_logistic_slope(u: float) -> float:
    """Derivative of the logistic stage of the windowed pooling at point u."""
    e = math.exp(-PESQ_SLOPE_CAP * u + 3.8224)
    return 4.0 * PESQ_SLOPE_CAP * e / (1.0 + e) ** 2


def propagate_utterance(radii, half_widths, aggregation: str, confidence: float,
                        window: int = 30, hop: int = 15,
                        pooled_input: float | None = None,
                        gap: int = DECORRELATION_GAP) -> tuple[float, float]:
    """Utterance-level (radius, half-width) from the per-frame bounds.

    ``average`` pooling keeps the mean radius and inflates the half-width by
    the decorrelation gap; ``pesq`` pooling rescales both by the window count
    and the logistic slope at the pooled value ``pooled_input``.
    """
    radii = np.asarray(list(radii), dtype=np.float64)
    half_widths = np.asarray(list(half_widths), dtype=np.float64)
    if radii.size == 0 or half_widths.size != radii.size:
        raise EmptyFrameSet("need matching nonempty frame bound sequences")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    z = float(norm.ppf((1.0 + confidence) / 2.0))
    sigmas = half_widths / z
    n = radii.size

    if aggregation == "average":
        b = float(radii.mean())
        h = z * math.sqrt(gap + 1.0) / math.sqrt(n) * float(np.sqrt(np.mean(sigmas**2)))
        return b, h
    if aggregation == "pesq":
        n_windows = max(1, (n - window) // hop)
        c_ol = math.ceil(window / hop)
        slope = PESQ_SLOPE_CAP if pooled_input is None else pesq_logistic_slope(pooled_input)
        scale = c_ol / math.sqrt(n_windows) * slope
        b = scale * float(np.sqrt(np.mean(radii**2)))
        h = z * scale * float(np.sqrt(np.mean(sigmas**2)))
        return b, h
    raise ValueError(f"unknown aggregation {aggregation!r}")


@dataclass(frozen=True)
class CorrelationBound:
    """Deterministic radius and probabilistic half-width of one coefficient."""

    level: str                # "utterance" or "scenario"
    metric: str               # "pcc" or "srcc"
    radius: float
    half_width: float
    confidence: float
    z_quantile: float


def _center(v: np.ndarray) -> np.ndarray:
    return v - v.mean()


def pcc_gradient(values: np.ndarray, mos: np.ndarray) -> np.ndarray:
    """Gradient of the linear correlation coefficient w.r.t. the value vector."""
    vc, mc = _center(values), _center(mos)
    nv, nm = np.linalg.norm(vc), np.linalg.norm(mc)
    if nv == 0.0 or nm == 0.0:
        raise ZeroVariance("constant vector in correlation gradient")
    r = float(vc @ mc / (nv * nm))
    return mc / (nv * nm) - r * vc / nv**2


def propagate_correlation(values, radii, half_widths, mos, metric: str,
                          confidence: float = 0.95, mc_draws: int = 10_000,
                          seed: int = 0) -> CorrelationBound:
    """Correlation-level (radius, half-width) for one (trial, source) pair.

    The linear coefficient uses first-order propagation through its gradient;
    the rank coefficient checks the two extreme bias orientations and takes a
    Monte Carlo quantile over independent Gaussian jitters whose scales come
    from the utterance half-widths. Draws use a counter-based generator keyed
    by ``seed`` so results are schedule-independent.
    """
    from .evalreport import pcc, srcc  # local import to avoid a cycle

    v = np.asarray(list(values), dtype=np.float64)
    b_vec = np.asarray(list(radii), dtype=np.float64)
    h_vec = np.asarray(list(half_widths), dtype=np.float64)
    m = np.asarray(list(mos), dtype=np.float64)
    if not (v.size == b_vec.size == h_vec.size == m.size) or v.size < 3:
        raise ValueError("need at least three matched systems")
    z = float(norm.ppf((1.0 + confidence) / 2.0))

    if metric == "pcc":
        grad = pcc_gradient(v, m)
        radius = float(np.linalg.norm(grad) * np.linalg.norm(_center(b_vec)))
        half = float(z * math.sqrt(np.sum(grad**2 * (h_vec / z) ** 2)))
        return CorrelationBound("utterance", "pcc", radius, half, confidence, z)
    if metric == "srcc":
        base = srcc(v, m)
        radius = max(abs(srcc(v + b_vec, m) - base), abs(srcc(v - b_vec, m) - base))
        rng = np.random.Generator(np.random.Philox(key=seed))
        scales = h_vec / z
        if np.all(scales == 0.0):
            half = 0.0
        else:
            jitters = rng.standard_normal((mc_draws, v.size)) * scales
            deltas = np.array([abs(srcc(v + eta, m) - base) for eta in jitters])
            half = float(np.quantile(deltas, (1.0 + confidence) / 2.0))
        return CorrelationBound("utterance", "srcc", float(radius), half,
                                confidence, z)
    raise ValueError(f"unknown metric {metric!r}")


def combine_scenario(bounds_by_trial: dict, metric: str, confidence: float = 0.95,
                     rho_within_trial: float = 0.0) -> CorrelationBound:
    """Scenario-level combination of per-(trial, source) correlation bounds.

    ``bounds_by_trial`` maps a trial id to the list of CorrelationBound of its
    sources. Jitters of sources within a trial share correlation
    ``rho_within_trial``; trials are independent.
    """
    z = float(norm.ppf((1.0 + confidence) / 2.0))
    total = sum(len(v) for v in bounds_by_trial.values())
    if total == 0:
        raise EmptyFrameSet("no correlation bounds to combine")
    radius = sum(b.radius for v in bounds_by_trial.values() for b in v) / total
    var_sum = 0.0
    for trial_bounds in bounds_by_trial.values():
        s = [b.half_width / z for b in trial_bounds]
        var_sum += sum(x**2 for x in s)
        for i in range(len(s)):
            for j in range(i + 1, len(s)):
                var_sum += 2.0 * rho_within_trial * s[i] * s[j]
    half = z * math.sqrt(var_sum) / total
    return CorrelationBound("scenario", metric, float(radius), float(half),
                            confidence, z)
