"""Frame-level perceptual separation and match measures on a diffusion-map
manifold, with deterministic error radii and non-asymptotic confidence
intervals, for evaluating source-separation systems."""

from .audio import Role, Utterance, read_wav, write_wav
from .manifold import (
    DiffusionGraph,
    DiffusionMapEmbedding,
    SpectralEmbedding,
    build_graph,
    decompose,
    diffusion_distance,
    embed,
)
from .measures import (
    ClusterStatsPM,
    ClusterStatsPS,
    GammaFit,
    compute_pm,
    compute_ps,
    fit_gamma,
    ks_gamma_diagnostic,
    mahalanobis,
    score_frame,
)
from .pipeline import RunConfig, evaluate, misalignment_sweep, run_evaluation

__version__ = "0.1.0"

__all__ = [
    "Role", "Utterance", "read_wav", "write_wav",
    "DiffusionGraph", "DiffusionMapEmbedding", "SpectralEmbedding",
    "build_graph", "decompose", "diffusion_distance", "embed",
    "ClusterStatsPM", "ClusterStatsPS", "GammaFit", "compute_pm", "compute_ps",
    "fit_gamma", "ks_gamma_diagnostic", "mahalanobis", "score_frame",
    "RunConfig", "evaluate", "misalignment_sweep", "run_evaluation",
    "__version__",
]
