"""Frame-to-utterance aggregation: plain averaging and windowed pooling.

The match measure averages; the separation measure uses the windowed p-norm
pooling with a logistic output stage, which penalizes low local scores the
way perceptual metrics do. Constants of the logistic stage follow the
wideband telephony calibration (offset 0.999, range 4, slope 1.3669,
shift 3.8224), so the pooled output lives in (0.999, 4.999).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptySet

LOGISTIC_OFFSET = 0.999
LOGISTIC_RANGE = 4.0
LOGISTIC_SLOPE = 1.3669
LOGISTIC_SHIFT = 3.8224


@dataclass(frozen=True)
class AggregationConfig:
    window: int = 30      # frames per pooling window
    hop: int = 15         # window hop in frames
    p: float = 6.0        # norm order inside a window

    def __post_init__(self):
        if not self.window >= self.hop >= 1:
            raise ValueError("need window >= hop >= 1")
        if self.p < 1:
            raise ValueError("norm order must be >= 1")


def aggregate_average(values) -> float:
    """Arithmetic mean of the frame values of one source."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise EmptySet("no frame values to average")
    return float(v.mean())


def n_windows(n_frames: int, cfg: AggregationConfig) -> int:
    """Number of pooling windows; at least one even for short sequences."""
    return max(1, (n_frames - cfg.window) // cfg.hop)


def pooled_input(values, cfg: AggregationConfig) -> float:
    """RMS over windows of within-window p-norms (the pre-logistic value)."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise EmptySet("no frame values to pool")
    m = n_windows(v.size, cfg)
    window_means = []
    for w in range(m):
        chunk = v[w * cfg.hop: w * cfg.hop + cfg.window]
        if chunk.size == 0:
            break
        window_means.append(float(np.mean(np.abs(chunk) ** cfg.p) ** (1.0 / cfg.p)))
    return float(np.sqrt(np.mean(np.square(window_means))))


def logistic_map(u: float) -> float:
    return LOGISTIC_OFFSET + LOGISTIC_RANGE / (
        1.0 + math.exp(-LOGISTIC_SLOPE * u + LOGISTIC_SHIFT))


def aggregate_pesq(values, cfg: AggregationConfig | None = None) -> float:
    """Windowed p-norm pooling followed by the logistic output stage."""
    cfg = cfg or AggregationConfig()
    return logistic_map(pooled_input(values, cfg))


def rescale_pooled(score: float) -> float:
    """Min-max rescale of the pooled output from (0.999, 4.999) to [0, 1]."""
    return (score - LOGISTIC_OFFSET) / LOGISTIC_RANGE
