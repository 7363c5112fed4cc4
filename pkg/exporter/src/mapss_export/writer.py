"""Writer for the ``.mapssemb`` binary embedding container.

Layout (little-endian): magic ``MAPS``, version u32, frame_count u32; per
frame a header (frame_index u32, N u32, M u32, N_p u32, n_sources u32), a
label table of N entries (source_id u32, kind u8, p u16) and the N x M
float32 row-major matrix. Row counts must satisfy N = n_sources * (N_p + 2).
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MAPS"
VERSION = 1

KIND_OUTPUT = 0
KIND_REFERENCE = 1
KIND_DISTORTION = 2

_HEADER = struct.Struct("<4sII")
_FRAME_HEADER = struct.Struct("<IIIII")
_LABEL = struct.Struct("<IBH")


def write_frames(path, frames) -> None:
    """Serialize ``frames``: iterable of (frame_index, labels, matrix)."""
    frames = list(frames)
    chunks = [_HEADER.pack(MAGIC, VERSION, len(frames))]
    for frame_index, labels, matrix in frames:
        matrix = np.ascontiguousarray(matrix, dtype="<f4")
        n, m = matrix.shape
        if not np.all(np.isfinite(matrix)):
            raise ValueError(f"frame {frame_index}: non-finite embeddings")
        sources = {lab[0] for lab in labels}
        n_p = sum(1 for lab in labels
                  if lab[1] == KIND_DISTORTION and lab[0] == labels[0][0])
        if n != len(sources) * (n_p + 2) or n != len(labels):
            raise ValueError(f"frame {frame_index}: inconsistent row bookkeeping")
        chunks.append(_FRAME_HEADER.pack(frame_index, n, m, n_p, len(sources)))
        for source_id, kind, p in labels:
            chunks.append(_LABEL.pack(source_id, kind, p))
        chunks.append(matrix.tobytes())
    Path(path).write_bytes(b"".join(chunks))
