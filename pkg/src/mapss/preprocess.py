"""Loudness normalization, overlap-frame detection and misalignment injection.

The loudness meter implements the K-weighted, gated integrated measurement of
ITU-R BS.1770-4 (400 ms blocks at 75% overlap, absolute gate at -70 LUFS,
relative gate at -10 LU), with filter coefficients designed for arbitrary
sample rates via the bilinear transform.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.signal

from .audio import Utterance
from .errors import DelayTooLong, LengthMismatch, SilentInput

DEFAULT_TARGET_LUFS = -23.0
DEFAULT_ACTIVITY_DB = -40.0
BLOCK_SECONDS = 0.4
BLOCK_OVERLAP = 0.75
ABSOLUTE_GATE_LUFS = -70.0
RELATIVE_GATE_LU = -10.0

SPEECH_FRAME_MS = 25.0
SPEECH_HOP_MS = 20.0
MUSIC_FRAME_MS = 160.0
MUSIC_HOP_MS = 100.0


def _k_weighting_sos(sample_rate: int) -> np.ndarray:
    """Second-order sections of the two-stage K-weighting filter."""
    # Stage 1: spherical-head high-shelf.
    f0, gain_db, q = 1681.9744509555319, 3.99984385397, 0.7071752369554193
    k = math.tan(math.pi * f0 / sample_rate)
    vh = 10.0 ** (gain_db / 20.0)
    vb = vh ** 0.499666774155
    a0 = 1.0 + k / q + k * k
    shelf = [
        (vh + vb * k / q + k * k) / a0,
        2.0 * (k * k - vh) / a0,
        (vh - vb * k / q + k * k) / a0,
        1.0,
        2.0 * (k * k - 1.0) / a0,
        (1.0 - k / q + k * k) / a0,
    ]
    # Stage 2: revised low-frequency B-curve high-pass.
    f0, q = 38.13547087613982, 0.5003270373253953
    k = math.tan(math.pi * f0 / sample_rate)
    a0 = 1.0 + k / q + k * k
    highpass = [
        1.0, -2.0, 1.0,
        1.0,
        2.0 * (k * k - 1.0) / a0,
        (1.0 - k / q + k * k) / a0,
    ]
    return np.array([shelf, highpass])


def block_powers(samples: np.ndarray, sample_rate: int) -> np.ndarray:
    """Mean square of the K-weighted signal over gating blocks."""
    step = int(round(sample_rate * BLOCK_SECONDS))
    hop = int(round(step * (1.0 - BLOCK_OVERLAP)))
    if samples.size < step:
        return np.zeros(0)
    weighted = scipy.signal.sosfilt(_k_weighting_sos(sample_rate), samples)
    n_blocks = (samples.size - step) // hop + 1
    powers = np.empty(n_blocks)
    for j in range(n_blocks):
        seg = weighted[j * hop: j * hop + step]
        powers[j] = np.mean(seg * seg)
    return powers


def integrated_loudness(u: Utterance) -> float:
    """Gated integrated loudness in LUFS."""
    powers = block_powers(u.samples, u.sample_rate)
    if powers.size == 0:
        raise SilentInput("signal shorter than one gating block")
    loudness = -0.691 + 10.0 * np.log10(np.maximum(powers, 1e-30))
    above_abs = powers[loudness > ABSOLUTE_GATE_LUFS]
    if above_abs.size == 0:
        raise SilentInput("all gating blocks below the absolute gate")
    relative_gate = -0.691 + 10.0 * math.log10(above_abs.mean()) + RELATIVE_GATE_LU
    kept = powers[(loudness > ABSOLUTE_GATE_LUFS) & (loudness > relative_gate)]
    if kept.size == 0:
        raise SilentInput("all gating blocks below the relative gate")
    return -0.691 + 10.0 * math.log10(kept.mean())


def normalize_loudness(u: Utterance, target_lufs: float = DEFAULT_TARGET_LUFS) -> Utterance:
    """Scale to the target integrated loudness, never letting the peak clip.

    If the required gain would push the absolute peak above full scale, the
    gain is reduced so the peak lands exactly at 1.0 and the result stays
    below the target.
    """
    if not math.isfinite(target_lufs):
        raise ValueError("target loudness must be finite")
    measured = integrated_loudness(u)
    gain = 10.0 ** ((target_lufs - measured) / 20.0)
    peak = float(np.max(np.abs(u.samples)))
    if peak * gain > 1.0:
        gain = 1.0 / peak
    return u.with_samples(u.samples * gain)


@dataclass(frozen=True)
class FramePlan:
    """Frame geometry plus the indices where at least two sources are active."""

    frame_length: int
    hop: int
    n_frames: int
    sample_rate: int
    active_frames: tuple
    active_sources: dict  # frame index -> tuple of active source ids

    @property
    def frames_per_second(self) -> float:
        return self.sample_rate / self.hop

    def frame_slice(self, f: int) -> slice:
        return slice(f * self.hop, f * self.hop + self.frame_length)


def frame_geometry(scenario: str, sample_rate: int) -> tuple[int, int]:
    """(frame_length, hop) in samples for a scenario family."""
    if scenario.startswith("music"):
        frame_ms, hop_ms = MUSIC_FRAME_MS, MUSIC_HOP_MS
    else:
        frame_ms, hop_ms = SPEECH_FRAME_MS, SPEECH_HOP_MS
    return (int(round(frame_ms * sample_rate / 1000.0)),
            int(round(hop_ms * sample_rate / 1000.0)))


def detect_overlap_frames(references: list[Utterance], frame_length: int, hop: int,
                          activity_db: float = DEFAULT_ACTIVITY_DB) -> FramePlan:
    """Frames in which at least two reference sources are simultaneously active.

    A source is active in a frame when the frame RMS is at or above
    ``activity_db`` relative to that source's whole-utterance RMS. Activity is
    judged on references only; outputs may legitimately be silent. An empty
    active set is a valid result.
    """
    if len(references) < 2:
        raise ValueError("need at least two reference sources")
    length = len(references[0])
    rate = references[0].sample_rate
    for ref in references[1:]:
        if len(ref) != length or ref.sample_rate != rate:
            raise LengthMismatch("references must share length and sample rate")
    if not frame_length > 0 or not 0 < hop <= frame_length:
        raise ValueError("need frame_length > 0 and 0 < hop <= frame_length")

    n_frames = max(0, (length - frame_length) // hop + 1)
    ratio = 10.0 ** (activity_db / 20.0)
    thresholds = [ratio * float(np.sqrt(np.mean(ref.samples**2))) for ref in references]
    active_sources = {}
    for f in range(n_frames):
        sl = slice(f * hop, f * hop + frame_length)
        active = []
        for ref, threshold in zip(references, thresholds):
            if threshold <= 0.0:
                continue
            frame_rms = float(np.sqrt(np.mean(ref.samples[sl] ** 2)))
            if frame_rms >= threshold:
                active.append(ref.source_id)
        if len(active) >= 2:
            active_sources[f] = tuple(sorted(active))
    return FramePlan(
        frame_length=frame_length, hop=hop, n_frames=n_frames, sample_rate=rate,
        active_frames=tuple(sorted(active_sources)),
        active_sources=active_sources,
    )


def inject_delay(u: Utterance, delay_ms: float) -> Utterance:
    """Shift by a head of zeros, keeping length; used by the stress harness."""
    if delay_ms < 0:
        raise ValueError("delay must be nonnegative")
    shift = int(round(delay_ms * u.sample_rate / 1000.0))
    if shift >= len(u):
        raise DelayTooLong(f"{delay_ms} ms exceeds the signal duration")
    if shift == 0:
        return u
    delayed = np.concatenate([np.zeros(shift), u.samples[:-shift]])
    return u.with_samples(delayed)
