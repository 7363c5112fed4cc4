"""Waveform encoders and the binary per-frame embedding container.

The built-in encoder is a raw passthrough (the frame samples are the feature
vector). Externally produced self-supervised embeddings enter through the
``.mapssemb`` format: little-endian, magic ``MAPS``, version, frame count,
then per frame a header (frame index, row count N, dimension M, bank size,
source count), a label table of (source_id u32, kind u8, p u16) and the
float32 row-major matrix. Row counts must satisfy N = n_sources * (N_p + 2).
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, FormatError, LengthMismatch, ShapeError

MAGIC = b"MAPS"
VERSION = 1

KIND_OUTPUT = 0
KIND_REFERENCE = 1
KIND_DISTORTION = 2

_HEADER = struct.Struct("<4sII")
_FRAME_HEADER = struct.Struct("<IIIII")
_LABEL = struct.Struct("<IBH")


@dataclass(frozen=True)
class EmbeddingMatrix:
    """One frame's item embeddings with (source, kind, p) row labels."""

    vectors: np.ndarray                     # N x M
    labels: tuple                           # of (source_id, kind, p)
    frame_index: int

    def __post_init__(self):
        vectors = np.asarray(self.vectors)
        if vectors.ndim != 2:
            raise ShapeError("vectors must be a 2-D matrix")
        if not np.all(np.isfinite(vectors)):
            raise FormatError("vectors contain non-finite entries")
        if len(self.labels) != vectors.shape[0]:
            raise ShapeError("one label per row required")
        if len(set(self.labels)) != len(self.labels):
            raise ShapeError("row labels must be unique")
        sources = sorted({lab[0] for lab in self.labels})
        n_p = self.bank_size
        expected = len(sources) * (n_p + 2)
        if vectors.shape[0] != expected:
            raise ShapeError(
                f"{vectors.shape[0]} rows but {len(sources)} sources with "
                f"{n_p} distortions require {expected}")
        for src in sources:
            kinds = sorted((lab[1], lab[2]) for lab in self.labels if lab[0] == src)
            wanted = sorted([(KIND_OUTPUT, 0), (KIND_REFERENCE, 0)]
                            + [(KIND_DISTORTION, p) for p in range(1, n_p + 1)])
            if kinds != wanted:
                raise ShapeError(f"source {src} has inconsistent row labels")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n_items(self) -> int:
        return self.vectors.shape[0]

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    @property
    def sources(self) -> tuple:
        return tuple(sorted({lab[0] for lab in self.labels}))

    @property
    def bank_size(self) -> int:
        return sum(1 for lab in self.labels if lab[1] == KIND_DISTORTION
                   and lab[0] == self.labels[0][0])

    def rows_of(self, source_id: int, kind: int) -> np.ndarray:
        idx = [i for i, lab in enumerate(self.labels)
               if lab[0] == source_id and lab[1] == kind]
        return self.vectors[idx]

    def row_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(sources, kinds) per row, for vectorized masking."""
        return (np.array([lab[0] for lab in self.labels]),
                np.array([lab[1] for lab in self.labels]))


def encode_raw(frame: np.ndarray, expected_length: int | None = None) -> np.ndarray:
    """Raw-waveform encoder: the frame samples are the feature vector."""
    v = np.asarray(frame, dtype=np.float64).ravel()
    if expected_length is not None and v.size != expected_length:
        raise LengthMismatch(f"frame has {v.size} samples, expected {expected_length}")
    return v


def assemble_frame_set(outputs: dict, references: dict, banks: dict,
                       frame_index: int) -> EmbeddingMatrix:
    """Stack per-source rows in canonical order: output, reference, bank.

    ``outputs``/``references`` map source id to a vector; ``banks`` maps
    source id to the ordered list of distortion vectors.
    """
    sources = sorted(outputs)
    if sorted(references) != sources or sorted(banks) != sources:
        raise DimensionMismatch("outputs, references and banks must share sources")
    dims = {np.asarray(outputs[s]).size for s in sources}
    dims |= {np.asarray(references[s]).size for s in sources}
    for s in sources:
        dims |= {np.asarray(v).size for v in banks[s]}
    if len(dims) != 1:
        raise DimensionMismatch(f"mixed feature dimensions {sorted(dims)}")

    rows, labels = [], []
    for s in sources:
        rows.append(np.asarray(outputs[s], dtype=np.float64))
        labels.append((s, KIND_OUTPUT, 0))
        rows.append(np.asarray(references[s], dtype=np.float64))
        labels.append((s, KIND_REFERENCE, 0))
        for p, vec in enumerate(banks[s], start=1):
            rows.append(np.asarray(vec, dtype=np.float64))
            labels.append((s, KIND_DISTORTION, p))
    return EmbeddingMatrix(vectors=np.vstack(rows), labels=tuple(labels),
                           frame_index=frame_index)


def write_embedding_file(path, frames: list[EmbeddingMatrix]) -> None:
    """Serialize frames to the binary container (vectors stored as float32)."""
    chunks = [_HEADER.pack(MAGIC, VERSION, len(frames))]
    for frame in frames:
        n, m = frame.vectors.shape
        n_p = frame.bank_size
        chunks.append(_FRAME_HEADER.pack(frame.frame_index, n, m, n_p,
                                         len(frame.sources)))
        for source_id, kind, p in frame.labels:
            chunks.append(_LABEL.pack(source_id, kind, p))
        chunks.append(np.ascontiguousarray(frame.vectors,
                                           dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_embedding_file(path) -> list[EmbeddingMatrix]:
    """Parse the binary container, validating structure and row bookkeeping."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError("file too short for the header")
    magic, version, frame_count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    offset = _HEADER.size
    frames = []
    for _ in range(frame_count):
        if offset + _FRAME_HEADER.size > len(blob):
            raise FormatError("truncated frame header")
        frame_index, n, m, n_p, n_sources = _FRAME_HEADER.unpack_from(blob, offset)
        offset += _FRAME_HEADER.size
        if n != n_sources * (n_p + 2):
            raise ShapeError(
                f"frame {frame_index}: {n} rows but {n_sources} sources with "
                f"{n_p} distortions require {n_sources * (n_p + 2)}")
        labels = []
        for _ in range(n):
            if offset + _LABEL.size > len(blob):
                raise FormatError("truncated label table")
            labels.append(_LABEL.unpack_from(blob, offset))
            offset += _LABEL.size
        nbytes = n * m * 4
        if offset + nbytes > len(blob):
            raise FormatError("truncated matrix payload")
        vectors = np.frombuffer(blob, dtype="<f4", count=n * m,
                                offset=offset).reshape(n, m).copy()
        offset += nbytes
        if not np.all(np.isfinite(vectors)):
            raise FormatError(f"frame {frame_index}: non-finite embedding values")
        frames.append(EmbeddingMatrix(vectors=vectors, labels=tuple(labels),
                                      frame_index=frame_index))
    if offset != len(blob):
        raise FormatError("trailing bytes after the last frame")
    return frames
