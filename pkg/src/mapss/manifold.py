"""Diffusion-map embedding of one frame's high-dimensional item set.

Pipeline per frame: Gaussian kernel with median-squared-distance bandwidth,
alpha-normalization against sampling density, row-stochastic transition
operator, spectral decomposition through the symmetric similarity transform,
and spectral-mass truncation of the nontrivial eigenpairs.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.spatial.distance import pdist, squareform
from sklearn.base import BaseEstimator
from sklearn.utils import check_array

from .errors import (
    DegenerateGraph,
    EigSolverFailure,
    IndexOutOfRange,
    NonPositiveSpectrum,
)

EIG_CLAMP_TOL = 1e-12


@dataclass(frozen=True)
class DiffusionGraph:
    """Kernel, transition operator and stationary distribution of one frame."""

    kernel: np.ndarray          # N x N symmetric, entries in [0, 1], unit diagonal
    bandwidth: float            # median off-diagonal squared distance
    alpha: float
    degrees: np.ndarray         # row sums of the alpha-normalized kernel
    transition: np.ndarray      # row-stochastic operator
    stationary: np.ndarray      # left fixed point, entries in (0, 1)

    @property
    def n_items(self) -> int:
        return self.kernel.shape[0]


@dataclass(frozen=True)
class SpectralEmbedding:
    """Nontrivial eigenpairs of the transition operator, plus truncation data.

    Eigenvectors are columns, normalized to unit norm under the stationary
    measure, ordered by nonincreasing eigenvalue. ``dim`` is the minimal
    number of leading eigenvalues whose mass fraction reaches ``tau``.
    """

    eigenvalues: np.ndarray     # shape (n_kept,), in (0, 1), nonincreasing
    eigenvectors: np.ndarray    # shape (N, n_kept)
    stationary: np.ndarray
    t: int
    tau: float
    dim: int

    @property
    def n_items(self) -> int:
        return self.eigenvectors.shape[0]

    @property
    def n_kept(self) -> int:
        return self.eigenvalues.shape[0]

    def coordinates(self, upto: int | None = None) -> np.ndarray:
        """All items' embedding coordinates ``lambda_l^t u_l`` up to ``upto`` dims."""
        k = self.n_kept if upto is None else upto
        return self.eigenvectors[:, :k] * self.eigenvalues[:k] ** self.t


def build_graph(vectors: np.ndarray, alpha: float = 1.0) -> DiffusionGraph:
    """Build the diffusion graph of an N x M item matrix.

    The kernel bandwidth is the median of the off-diagonal squared pairwise
    distances; ``alpha`` in [0, 1] removes (1.0) or keeps (0.0) sampling
    density bias before row normalization.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need a 2-D matrix with at least two rows, got shape {x.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if not np.all(np.isfinite(x)):
        raise ValueError("item matrix contains non-finite entries")

    sq_dists = squareform(pdist(x, metric="sqeuclidean"))
    n = x.shape[0]
    off_diag = sq_dists[~np.eye(n, dtype=bool)]
    bandwidth = float(np.median(off_diag))
    if bandwidth <= 0.0:
        raise DegenerateGraph("median pairwise squared distance is zero")

    kernel = np.exp(-sq_dists / bandwidth)
    np.fill_diagonal(kernel, 1.0)

    if alpha > 0.0:
        v = kernel.sum(axis=1)
        k_alpha = kernel / np.outer(v, v) ** alpha
    else:
        k_alpha = kernel
    degrees = k_alpha.sum(axis=1)
    transition = k_alpha / degrees[:, None]
    stationary = degrees / degrees.sum()

    return DiffusionGraph(
        kernel=kernel,
        bandwidth=bandwidth,
        alpha=float(alpha),
        degrees=degrees,
        transition=transition,
        stationary=stationary,
    )


def decompose(graph: DiffusionGraph, t: int = 1, tau: float = 0.99) -> SpectralEmbedding:
    """Spectral decomposition of the transition operator.

    Solved on the symmetric conjugate ``D^(1/2) P D^(-1/2)`` for stability.
    The trivial pair (eigenvalue 1, constant eigenvector) is dropped, the rest
    sorted descending and normalized to unit norm under the stationary
    measure. Eigenvalues at or below 1e-12 are clamped out of the kept set.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if t < 1:
        raise ValueError(f"diffusion time must be a positive integer, got {t}")

    d_sqrt = np.sqrt(graph.degrees)
    sym = graph.transition * (d_sqrt[:, None] / d_sqrt[None, :])
    sym = 0.5 * (sym + sym.T)
    try:
        eigvals, eigvecs = scipy.linalg.eigh(sym, driver="evd",
                                             check_finite=False, overwrite_a=True)
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover - rare
        raise EigSolverFailure(str(exc)) from exc

    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]

    # Map back to right eigenvectors of P, scaled so that
    # sum_i pi_i u_l(i)^2 = 1 (orthonormal under the stationary measure).
    total_degree = graph.degrees.sum()
    u = eigvecs / d_sqrt[:, None] * np.sqrt(total_degree)

    # Drop the trivial pair and clamp the numerically nonpositive tail.
    eigvals = eigvals[1:]
    u = u[:, 1:]
    keep = eigvals > EIG_CLAMP_TOL
    if not np.any(keep):
        raise NonPositiveSpectrum("no positive nontrivial eigenvalues remain")
    eigvals = eigvals[keep]
    u = u[:, keep]

    # Deterministic sign: first coordinate of nonnegligible magnitude positive.
    for col in range(u.shape[1]):
        nz = np.nonzero(np.abs(u[:, col]) > 1e-9)[0]
        if nz.size and u[nz[0], col] < 0:
            u[:, col] = -u[:, col]

    mass = np.cumsum(eigvals)
    ratio = mass / mass[-1]
    dim = int(np.argmax(ratio >= tau)) + 1

    return SpectralEmbedding(
        eigenvalues=eigvals,
        eigenvectors=u,
        stationary=graph.stationary,
        t=int(t),
        tau=float(tau),
        dim=dim,
    )


def embed(se: SpectralEmbedding, item: int, dim: int | None = None) -> np.ndarray:
    """Truncated embedding of one item: ``(lambda_l^t u_l(item))`` for l <= dim."""
    if not 0 <= item < se.n_items:
        raise IndexOutOfRange(f"item {item} outside 0..{se.n_items - 1}")
    d = se.dim if dim is None else dim
    return se.eigenvalues[:d] ** se.t * se.eigenvectors[item, :d]


def diffusion_distance(graph: DiffusionGraph, i: int, j: int, t: int = 1) -> float:
    """Distance between the t-step transition rows of items i and j.

    Computed directly from the powered operator, weighted by the reciprocal
    stationary distribution; equals the Euclidean distance between the items'
    full (untruncated) embeddings up to numerical error.
    """
    n = graph.n_items
    for k in (i, j):
        if not 0 <= k < n:
            raise IndexOutOfRange(f"item {k} outside 0..{n - 1}")
    if i == j:
        return 0.0
    p_t = np.linalg.matrix_power(graph.transition, t)
    diff = p_t[i] - p_t[j]
    return float(np.sqrt(np.sum(diff**2 / graph.stationary)))


class DiffusionMapEmbedding(BaseEstimator):
    """Scikit-learn style wrapper around the per-frame diffusion embedding.

    ``fit(X)`` builds the graph and spectrum of the rows of X;
    ``fit_transform`` returns the truncated coordinates. Fitted attributes
    follow the usual trailing-underscore convention.

    Parameters
    ----------
    alpha : float, default=1.0
        Density-normalization exponent; 1 removes density bias, 0 keeps it.
    t : int, default=1
        Diffusion time.
    tau : float, default=0.99
        Spectral-mass retention fraction choosing the truncation dimension.
    """

    def __init__(self, alpha: float = 1.0, t: int = 1, tau: float = 0.99):
        self.alpha = alpha
        self.t = t
        self.tau = tau

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.graph_ = build_graph(X, alpha=self.alpha)
        self.spectrum_ = decompose(self.graph_, t=self.t, tau=self.tau)
        self.eigenvalues_ = self.spectrum_.eigenvalues
        self.eigenvectors_ = self.spectrum_.eigenvectors
        self.stationary_ = self.graph_.stationary
        self.n_components_ = self.spectrum_.dim
        self.embedding_ = self.spectrum_.coordinates(self.n_components_)
        return self

    def fit_transform(self, X, y=None):
        return self.fit(X).embedding_
