"""Mono waveform container and WAV file I/O (PCM 16/24-bit and float32)."""

import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.io.wavfile

from .errors import FormatError


class Role(str, Enum):
    REFERENCE = "reference"
    OUTPUT = "output"
    MIXTURE = "mixture"


@dataclass(frozen=True)
class Utterance:
    """A mono signal with rate metadata; samples are float64 full scale +-1."""

    samples: np.ndarray
    sample_rate: int
    role: Role = Role.REFERENCE
    source_id: int = 0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("only mono signals are supported")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "Utterance":
        return replace(self, samples=np.asarray(samples, dtype=np.float64))


def read_wav(path, role: Role = Role.REFERENCE, source_id: int = 0) -> Utterance:
    """Read a mono WAV file; integer PCM is scaled to full-scale +-1."""
    try:
        rate, data = scipy.io.wavfile.read(str(path))
    except ValueError as exc:
        raise FormatError(f"cannot parse {path}: {exc}") from exc
    if data.ndim != 1:
        raise FormatError(f"{path} is not mono ({data.ndim} channels)")
    if data.dtype == np.int16:
        samples = data / 32768.0
    elif data.dtype == np.int32:
        samples = data / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    return Utterance(samples=samples, sample_rate=int(rate),
                     role=role, source_id=source_id)


def write_wav(path, utterance: Utterance, subtype: str = "float32") -> None:
    """Write a mono WAV file as 16/24-bit PCM or 32-bit float."""
    path = str(path)
    x = np.clip(utterance.samples, -1.0, 1.0)
    if subtype == "float32":
        scipy.io.wavfile.write(path, utterance.sample_rate, x.astype(np.float32))
    elif subtype == "pcm16":
        scaled = np.round(x * 32767.0).astype(np.int16)
        scipy.io.wavfile.write(path, utterance.sample_rate, scaled)
    elif subtype == "pcm24":
        _write_wav_pcm24(path, utterance.sample_rate, x)
    else:
        raise ValueError(f"unsupported subtype {subtype!r}")


def _write_wav_pcm24(path: str, rate: int, x: np.ndarray) -> None:
    # 24-bit PCM is not covered by scipy's writer; pack 3-byte little-endian
    # samples into a minimal RIFF container.
    scaled = np.round(x * 8388607.0).astype(np.int32)
    raw = scaled.astype("<i4").tobytes()
    payload = b"".join(raw[i:i + 3] for i in range(0, len(raw), 4))
    byte_rate = rate * 3
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE", b"fmt ", 16,
        1, 1, rate, byte_rate, 3, 24, b"data", len(payload))
    Path(path).write_bytes(header + payload)
