"""Bank of hand-crafted perceptual distortions of a reference waveform.

Thirteen families, parameterized separately for the separation (PS) and match
(PM) measures. Continuous table ranges are sampled on fixed four-point grids
(paired across parameters of the same family); stochastic families draw from
a counter-based generator keyed by the bank seed and the spec index, so banks
are bit-reproducible. Every family preserves length and sample rate.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.signal
import yaml

from .audio import Utterance
from .errors import InvalidParams, TooShort

MIN_INPUT_SAMPLES = 64
NOISE_SNRS_DB = (-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0)
NOISE_COLORS = ("white", "pink", "brown")


def _grid(lo: float, hi: float, n: int = 4) -> tuple:
    return tuple(float(v) for v in np.linspace(lo, hi, n))


# Declarative family tables. Lists of tuples are explicit variants; paired
# continuous ranges are pre-gridded. Signal-adaptive entries are resolved at
# application time from the input waveform.
PS_TABLE = {
    "notch": {"centers_hz": (500.0, 1000.0, 2000.0, 4000.0, 8000.0),
              "bandwidth_hz": 120.0},
    "comb": {"pairs": tuple(zip(_grid(2.5, 15.0), _grid(0.4, 0.9)))},
    "tremolo": {"pairs": tuple(zip((1.0, 2.0, 4.0, 6.0), _grid(0.3, 1.0)))},
    "additive_noise": {"snrs_db": NOISE_SNRS_DB, "colors": NOISE_COLORS},
    "harmonic_tone": {"pairs": tuple(zip((100.0, 500.0, 1000.0, 4000.0),
                                         _grid(0.02, 0.08))),
                      "amplitude_mode": "absolute"},
    "reverberation": {"pairs": tuple(zip(_grid(0.3, 1.1), (5.0, 10.0, 15.0, 20.0))),
                      "mode": "rt60"},
    "noise_gate": {"thresholds": (0.005, 0.01, 0.02, 0.04),
                   "threshold_mode": "absolute"},
    "pitch_shift": {"semitones": (-4.0, -2.0, 2.0, 4.0)},
    "low_pass": {"cutoffs_hz": (2000.0, 3000.0, 4000.0, 6000.0)},
    "high_pass": {"cutoffs_hz": (100.0, 300.0, 500.0, 800.0)},
    "echo": {"pairs": tuple(zip(_grid(5.0, 20.0), _grid(0.3, 0.7)))},
    "hard_clip": {"thresholds": (0.3, 0.5, 0.7), "threshold_mode": "absolute"},
    "vibrato": {"pairs": tuple(zip((3.0, 5.0, 7.0), _grid(0.001, 0.003, 3))),
                "depth_mode": "fixed"},
}

PM_TABLE = {
    "notch": {"n_notches": (5, 10, 15, 20), "band_hz": (80.0, 0.45),
              "spacing_hz": 300.0, "bandwidth_hz": 120.0},
    "comb": {"pairs": ((2.5, 0.4), (5.0, 0.5), (7.5, 0.6), (10.0, 0.7), (12.5, 0.9))},
    "tremolo": {"pairs": tuple((r, 1.0) for r in (1.0, 2.0, 4.0, 6.0))},
    "additive_noise": {"snrs_db": NOISE_SNRS_DB, "colors": NOISE_COLORS},
    "harmonic_tone": {"pairs": tuple(zip((100.0, 500.0, 1000.0, 4000.0),
                                         (0.4, 0.6, 0.8, 1.0))),
                      "amplitude_mode": "rms_relative"},
    "reverberation": {"pairs": tuple(zip((50.0, 100.0, 200.0, 400.0),
                                         (0.3, 0.5, 0.7, 0.9))),
                      "mode": "tail_decay"},
    "noise_gate": {"thresholds": (0.05, 0.1, 0.2, 0.4),
                   "threshold_mode": "a95_relative"},
    "pitch_shift": {"semitones": (-4.0, -2.0, 2.0, 4.0)},
    "low_pass": {"energy_quantiles": (0.50, 0.70, 0.85, 0.95)},
    "high_pass": {"energy_quantiles": (0.05, 0.15, 0.30, 0.50)},
    "echo": {"pairs": ((50.0, 0.4), (100.0, 0.5), (150.0, 0.7))},
    "hard_clip": {"thresholds": (0.3, 0.5, 0.7), "threshold_mode": "a95_relative"},
    "vibrato": {"rates_hz": (3.0, 5.0, 7.0), "depth_mode": "adaptive",
                "depth_clip": (0.01, 0.05)},
}


@dataclass(frozen=True)
class DistortionSpec:
    family: str
    params: dict
    variant: str            # "PS" or "PM"
    seed: int               # bank seed
    index: int              # position in the bank, part of the RNG key

    def rng(self) -> np.random.Generator:
        key = np.array([self.seed % 2**64, self.index], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def _tables(variant: str) -> dict:
    if variant == "PS":
        return PS_TABLE
    if variant == "PM":
        return PM_TABLE
    raise InvalidParams(f"unknown variant {variant!r}")


def load_bank_config(path) -> dict:
    """Family/grid tables from a YAML file, keyed by variant then family."""
    with open(path) as fh:
        config = yaml.safe_load(fh)
    for variant, families in config.items():
        if variant not in ("PS", "PM"):
            raise InvalidParams(f"unknown variant {variant!r} in bank config")
        for family in families:
            if family not in PS_TABLE:
                raise InvalidParams(f"unknown family {family!r} in bank config")
    return config


def bank_specs(variant: str, sample_rate: int, seed: int = 0,
               config: dict | None = None) -> list[DistortionSpec]:
    """Ordered, deterministic list of distortion specs for one variant.

    Entries whose parameters cannot be realized at the given sample rate
    (e.g. notch centers at or above the usable band) are dropped.
    """
    table = dict(_tables(variant))
    if config and variant in config:
        table = {fam: dict(params) for fam, params in config[variant].items()}
    nyquist = sample_rate / 2.0
    specs: list[DistortionSpec] = []

    def push(family: str, params: dict):
        specs.append(DistortionSpec(family=family, params=params, variant=variant,
                                    seed=seed, index=len(specs)))

    for family, cfg in table.items():
        if family == "notch" and variant == "PS":
            for c in cfg["centers_hz"]:
                if c < 0.45 * sample_rate:
                    push("notch", {"centers_hz": (c,),
                                   "bandwidth_hz": cfg["bandwidth_hz"]})
        elif family == "notch":
            lo, hi_frac = cfg["band_hz"]
            for n in cfg["n_notches"]:
                push("notch", {"n_random": int(n), "band_hz": (lo, hi_frac * sample_rate),
                               "spacing_hz": cfg["spacing_hz"],
                               "bandwidth_hz": cfg["bandwidth_hz"]})
        elif family == "comb":
            for delay_ms, gain in cfg["pairs"]:
                push("comb", {"delay_ms": delay_ms, "feedback": gain})
        elif family == "tremolo":
            for rate, depth in cfg["pairs"]:
                push("tremolo", {"rate_hz": rate, "depth": depth})
        elif family == "additive_noise":
            for snr in cfg["snrs_db"]:
                for color in cfg["colors"]:
                    push("additive_noise", {"snr_db": snr, "color": color})
        elif family == "harmonic_tone":
            for freq, amp in cfg["pairs"]:
                if freq < nyquist:
                    push("harmonic_tone", {"freq_hz": freq, "amplitude": amp,
                                           "amplitude_mode": cfg["amplitude_mode"]})
        elif family == "reverberation":
            if cfg["mode"] == "rt60":
                for rt60, tail_ms in cfg["pairs"]:
                    push("reverberation", {"rt60_s": rt60, "tail_ms": tail_ms,
                                           "scale": 0.5, "mode": "rt60"})
            else:
                for tail_ms, decay in cfg["pairs"]:
                    push("reverberation", {"tail_ms": tail_ms, "scale": decay,
                                           "mode": "tail_decay"})
        elif family == "noise_gate":
            for thr in cfg["thresholds"]:
                push("noise_gate", {"threshold": thr,
                                    "threshold_mode": cfg["threshold_mode"]})
        elif family == "pitch_shift":
            for s in cfg["semitones"]:
                push("pitch_shift", {"semitones": s})
        elif family == "low_pass":
            if "cutoffs_hz" in cfg:
                for c in cfg["cutoffs_hz"]:
                    if c < 0.45 * sample_rate:
                        push("low_pass", {"cutoff_hz": c})
            else:
                for q in cfg["energy_quantiles"]:
                    push("low_pass", {"energy_quantile": q})
        elif family == "high_pass":
            if "cutoffs_hz" in cfg:
                for c in cfg["cutoffs_hz"]:
                    if c < 0.45 * sample_rate:
                        push("high_pass", {"cutoff_hz": c})
            else:
                for q in cfg["energy_quantiles"]:
                    push("high_pass", {"energy_quantile": q})
        elif family == "echo":
            for delay_ms, gain in cfg["pairs"]:
                push("echo", {"delay_ms": delay_ms, "gain": gain})
        elif family == "hard_clip":
            for thr in cfg["thresholds"]:
                push("hard_clip", {"threshold": thr,
                                   "threshold_mode": cfg["threshold_mode"]})
        elif family == "vibrato":
            if cfg.get("depth_mode") == "adaptive":
                lo, hi = cfg["depth_clip"]
                for rate in cfg["rates_hz"]:
                    push("vibrato", {"rate_hz": rate, "depth_mode": "adaptive",
                                     "depth_clip": (lo, hi)})
            else:
                for rate, depth in cfg["pairs"]:
                    push("vibrato", {"rate_hz": rate, "depth": depth,
                                     "depth_mode": "fixed"})
        else:
            raise InvalidParams(f"unknown family {family!r}")
    return specs


# --- per-family signal processing ---------------------------------------------

def _a95(x: np.ndarray) -> float:
    return float(np.percentile(np.abs(x), 95))


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


def _colored_noise(color: str, n: int, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(n)
    if color == "white":
        return white
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n)
    shaping = np.zeros_like(freqs)
    nonzero = freqs > 0
    if color == "pink":
        shaping[nonzero] = 1.0 / np.sqrt(freqs[nonzero])
    elif color == "brown":
        shaping[nonzero] = 1.0 / freqs[nonzero]
    else:
        raise InvalidParams(f"unknown noise color {color!r}")
    return np.fft.irfft(spectrum * shaping, n=n)


def _notch(x, fs, params, rng):
    bandwidth = params["bandwidth_hz"]
    if "centers_hz" in params:
        centers = list(params["centers_hz"])
    else:
        lo, hi = params["band_hz"]
        spacing = params["spacing_hz"]
        centers = []
        for _ in range(10_000):
            if len(centers) >= params["n_random"]:
                break
            cand = float(rng.uniform(lo, hi))
            if all(abs(cand - c) >= spacing for c in centers):
                centers.append(cand)
        centers.sort()
    y = x
    for center in centers:
        if not 0 < center < 0.5 * fs:
            raise InvalidParams(f"notch center {center} Hz outside (0, fs/2)")
        b, a = scipy.signal.iirnotch(center, center / bandwidth, fs=fs)
        y = scipy.signal.lfilter(b, a, y)
    return y


def _comb(x, fs, params, rng):
    delay = int(round(params["delay_ms"] * fs / 1000.0))
    gain = params["feedback"]
    if not 0.0 < gain < 1.0:
        raise InvalidParams("feedback gain must lie in (0, 1)")
    if delay < 1 or delay >= x.size:
        raise TooShort("comb delay does not fit the signal")
    a = np.zeros(delay + 1)
    a[0], a[delay] = 1.0, -gain
    return scipy.signal.lfilter([1.0], a, x)


def _tremolo(x, fs, params, rng):
    depth = params["depth"]
    if not 0.0 < depth <= 1.0:
        raise InvalidParams("tremolo depth must lie in (0, 1]")
    t = np.arange(x.size) / fs
    modulation = 1.0 - depth * (0.5 + 0.5 * np.sin(2 * np.pi * params["rate_hz"] * t))
    return x * modulation


def _additive_noise(x, fs, params, rng):
    noise = _colored_noise(params["color"], x.size, rng)
    rms_x, rms_n = _rms(x), _rms(noise)
    if rms_x == 0.0 or rms_n == 0.0:
        return x.copy()
    noise *= rms_x / rms_n * 10.0 ** (-params["snr_db"] / 20.0)
    return x + noise


def _harmonic_tone(x, fs, params, rng):
    freq = params["freq_hz"]
    if not 0 < freq < 0.5 * fs:
        raise InvalidParams(f"tone frequency {freq} Hz outside (0, fs/2)")
    amp = params["amplitude"]
    if params["amplitude_mode"] == "rms_relative":
        amp = amp * _rms(x)
    t = np.arange(x.size) / fs
    return x + amp * np.sin(2 * np.pi * freq * t)


def _reverberation(x, fs, params, rng):
    tail_len = int(round(params["tail_ms"] * fs / 1000.0))
    if tail_len < 1:
        raise InvalidParams("reverberation tail must span at least one sample")
    t = np.arange(1, tail_len + 1) / fs
    if params["mode"] == "rt60":
        decay_time = params["rt60_s"]
    else:
        decay_time = params["tail_ms"] / 1000.0
    envelope = np.exp(-6.9078 * t / decay_time)
    impulse = np.concatenate([[1.0], params["scale"] * envelope
                              * rng.standard_normal(tail_len)])
    return scipy.signal.fftconvolve(x, impulse)[: x.size]


def _noise_gate(x, fs, params, rng):
    threshold = params["threshold"]
    if params["threshold_mode"] == "a95_relative":
        threshold = threshold * _a95(x)
    win = max(1, int(round(0.005 * fs)))
    envelope = np.sqrt(np.convolve(x * x, np.ones(win) / win, mode="same"))
    return np.where(envelope >= threshold, x, 0.0)


def _ola_stretch(x, rate, grain=1024, hop_out=256, search=192):
    """Waveform-similarity overlap-add time stretch by ``rate`` (>1 lengthens).

    Each synthesis grain is picked near its nominal analysis position at the
    lag that best continues the previous grain, keeping the stretch
    phase-coherent on tonal material.
    """
    if x.size <= grain + search:
        grain = max(32, 2 ** int(math.log2(max(x.size // 4, 32))))
        hop_out = grain // 4
        search = grain // 2
    window = np.hanning(grain)
    out_len = int(round(x.size * rate))
    out = np.zeros(out_len + grain)
    norm = np.zeros(out_len + grain)
    max_start = max(x.size - grain, 0)
    windows = np.lib.stride_tricks.sliding_window_view(x, grain)
    prev_in = None
    for pos_out in range(0, out_len, hop_out):
        nominal = min(int(round(pos_out / rate)), max_start)
        if prev_in is None:
            pos_in = nominal
        else:
            # the natural continuation of the previous grain
            target = min(prev_in + hop_out, max_start)
            ref = x[target: target + hop_out]
            lo = max(nominal - search, 0)
            hi = min(nominal + search, max_start)
            if hi > lo and ref.size == hop_out:
                cands = windows[lo: hi + 1, :hop_out]
                pos_in = lo + int(np.argmax(cands @ ref))
            else:
                pos_in = nominal
        chunk = x[pos_in: pos_in + grain]
        if chunk.size < grain:
            chunk = np.pad(chunk, (0, grain - chunk.size))
        out[pos_out: pos_out + grain] += chunk * window
        norm[pos_out: pos_out + grain] += window
        prev_in = pos_in
    out /= np.maximum(norm, 1e-8)
    return out[:out_len]


def _pitch_shift(x, fs, params, rng):
    semitones = params["semitones"]
    factor = 2.0 ** (semitones / 12.0)
    stretched = _ola_stretch(x, rate=factor)
    return scipy.signal.resample(stretched, x.size)


def _butter_sos(cutoff, fs, btype):
    if not 0 < cutoff < 0.5 * fs:
        raise InvalidParams(f"cutoff {cutoff} Hz outside (0, fs/2)")
    return scipy.signal.butter(4, cutoff, btype=btype, fs=fs, output="sos")


def _energy_quantile_cutoff(x, fs, quantile):
    power = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(x.size, d=1.0 / fs)
    total = power.sum()
    if total == 0.0:
        return 0.25 * fs
    cum = np.cumsum(power) / total
    cutoff = float(freqs[np.searchsorted(cum, quantile)])
    cutoff = round(cutoff / 100.0) * 100.0
    return float(np.clip(cutoff, 100.0, 0.45 * fs))


def _low_pass(x, fs, params, rng):
    cutoff = params.get("cutoff_hz")
    if cutoff is None:
        cutoff = _energy_quantile_cutoff(x, fs, params["energy_quantile"])
    return scipy.signal.sosfilt(_butter_sos(cutoff, fs, "low"), x)


def _high_pass(x, fs, params, rng):
    cutoff = params.get("cutoff_hz")
    if cutoff is None:
        cutoff = _energy_quantile_cutoff(x, fs, params["energy_quantile"])
    return scipy.signal.sosfilt(_butter_sos(cutoff, fs, "high"), x)


def _echo(x, fs, params, rng):
    delay = int(round(params["delay_ms"] * fs / 1000.0))
    if delay < 1 or delay >= x.size:
        raise TooShort("echo delay does not fit the signal")
    y = x.copy()
    y[delay:] += params["gain"] * x[:-delay]
    return y


def _hard_clip(x, fs, params, rng):
    threshold = params["threshold"]
    if params["threshold_mode"] == "a95_relative":
        threshold = threshold * _a95(x)
    if threshold <= 0.0:
        raise InvalidParams("clip threshold must be positive")
    return np.clip(x, -threshold, threshold)


def _vibrato(x, fs, params, rng):
    rate = params["rate_hz"]
    if params.get("depth_mode") == "adaptive":
        lo, hi = params["depth_clip"]
        depth = float(np.clip(_a95(x) / 10.0, lo, hi))
    else:
        depth = params["depth"]
    n = np.arange(x.size)
    swing = depth * fs / (2.0 * np.pi * rate)
    positions = n - swing * (1.0 - np.cos(2.0 * np.pi * rate * n / fs))
    positions = np.clip(positions, 0, x.size - 1)
    return np.interp(positions, n, x)


_FAMILIES = {
    "notch": _notch,
    "comb": _comb,
    "tremolo": _tremolo,
    "additive_noise": _additive_noise,
    "harmonic_tone": _harmonic_tone,
    "reverberation": _reverberation,
    "noise_gate": _noise_gate,
    "pitch_shift": _pitch_shift,
    "low_pass": _low_pass,
    "high_pass": _high_pass,
    "echo": _echo,
    "hard_clip": _hard_clip,
    "vibrato": _vibrato,
}


def apply_distortion(y: Utterance, spec: DistortionSpec) -> Utterance:
    """One distorted copy of ``y``; same length and sample rate, deterministic."""
    if spec.family not in _FAMILIES:
        raise InvalidParams(f"unknown family {spec.family!r}")
    x = y.samples
    if x.size < MIN_INPUT_SAMPLES:
        raise TooShort(f"need at least {MIN_INPUT_SAMPLES} samples, got {x.size}")
    out = _FAMILIES[spec.family](x, y.sample_rate, spec.params, spec.rng())
    if out.size > x.size:
        out = out[: x.size]
    elif out.size < x.size:
        out = np.pad(out, (0, x.size - out.size))
    return y.with_samples(out)


def generate_bank(y: Utterance, variant: str, seed: int = 0,
                  config: dict | None = None) -> tuple[list[Utterance], list[DistortionSpec]]:
    """All distorted copies of ``y`` for one measure variant, in bank order."""
    specs = bank_specs(variant, y.sample_rate, seed=seed, config=config)
    return [apply_distortion(y, spec) for spec in specs], specs
