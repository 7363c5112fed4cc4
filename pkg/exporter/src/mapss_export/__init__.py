"""Frame-aligned hidden-state exporter for the .mapssemb embedding format."""

from .exporter import (
    CheckpointUnavailable,
    ExportConfig,
    LayerOutOfRange,
    SourceFiles,
    export_embeddings,
    read_manifest,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointUnavailable", "ExportConfig", "LayerOutOfRange", "SourceFiles",
    "export_embeddings", "read_manifest", "__version__",
]
