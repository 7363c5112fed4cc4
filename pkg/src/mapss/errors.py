"""Exception hierarchy shared across the package."""


class MapssError(Exception):
    """Base class for all package errors."""


# --- audio / preprocessing ---------------------------------------------------

class SilentInput(MapssError):
    """Integrated loudness is undefined (all-zero or below the gating floor)."""


class LengthMismatch(MapssError):
    """Signals that must share length or sample rate do not."""


class DelayTooLong(MapssError):
    """Requested delay is not shorter than the signal."""


# --- distortions -------------------------------------------------------------

class InvalidParams(MapssError):
    """Distortion parameters outside the allowed table range."""


class TooShort(MapssError):
    """Input shorter than the latency of the requested distortion family."""


# --- embeddings --------------------------------------------------------------

class FormatError(MapssError):
    """Embedding file is malformed (bad magic, version, truncation, NaNs)."""


class ShapeError(MapssError):
    """Embedding row count disagrees with the label bookkeeping."""


class DimensionMismatch(MapssError):
    """Feature dimensions disagree across items of one frame set."""


# --- manifold ----------------------------------------------------------------

class DegenerateGraph(MapssError):
    """All pairwise distances are zero; no kernel bandwidth exists."""


class EigSolverFailure(MapssError):
    """The symmetric eigensolver did not converge."""


class NonPositiveSpectrum(MapssError):
    """No strictly positive nontrivial eigenvalues remain after clamping."""


class IndexOutOfRange(MapssError):
    """Item index outside the graph."""


# --- measures ----------------------------------------------------------------

class SolveFailure(MapssError):
    """Regularized covariance is numerically singular."""


class SingleSource(MapssError):
    """PS is undefined with fewer than two clusters."""


class DegenerateMoments(MapssError):
    """Zero variance of squared distances; the Gamma fit is undefined."""


# --- bounds ------------------------------------------------------------------

class ComplementNotPD(MapssError):
    """Schur complement is not positive definite after regularization."""


class EmptyFrameSet(MapssError):
    """No frames available for aggregation or propagation."""


# --- reporting ---------------------------------------------------------------

class ZeroVariance(MapssError):
    """Constant vector where variability is required."""


class EmptySet(MapssError):
    """Empty value set where at least one element is required."""


class InsufficientSystems(MapssError):
    """Fewer systems than required for a correlation report."""
