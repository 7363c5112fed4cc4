"""Frame-aligned hidden-state export from pretrained self-supervised models.

Every waveform of a manifest (system outputs, references and their distortion
banks) is encoded independently on the full utterance; the hidden states of
the chosen transformer layer are then sliced to frame-aligned vectors at the
analysis hop by nearest model-stride index. Spectrogram-transformer
checkpoints are mean-pooled over frequency patches into 100 ms bins first.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal
import yaml

from .writer import KIND_DISTORTION, KIND_OUTPUT, KIND_REFERENCE, write_frames

MODEL_RATE = 16_000
SCENARIO_GEOMETRY = {          # (frame_ms, hop_ms)
    "english": (25.0, 20.0),
    "spanish": (25.0, 20.0),
    "music": (160.0, 100.0),
}


class CheckpointUnavailable(Exception):
    """The checkpoint cannot be loaded from the given identifier or path."""


class LayerOutOfRange(Exception):
    """Requested layer exceeds the checkpoint's transformer depth."""


@dataclass
class ExportConfig:
    checkpoint: str
    layer: int
    scenario: str = "english"
    frame_ms: float | None = None
    hop_ms: float | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIO_GEOMETRY:
            raise ValueError(f"scenario must be one of {sorted(SCENARIO_GEOMETRY)}")
        frame_default, hop_default = SCENARIO_GEOMETRY[self.scenario]
        if self.frame_ms is None:
            self.frame_ms = frame_default
        if self.hop_ms is None:
            self.hop_ms = hop_default


@dataclass
class SourceFiles:
    output: str
    reference: str
    distortions: list = field(default_factory=list)


def read_manifest(path) -> list[SourceFiles]:
    """Per-source file lists from a YAML manifest, paths resolved relative to it."""
    base = Path(path).parent
    with open(path) as fh:
        raw = yaml.safe_load(fh)

    def resolve(p):
        p = Path(p)
        return str(p if p.is_absolute() else base / p)

    sources = []
    for entry in raw["sources"]:
        sources.append(SourceFiles(
            output=resolve(entry["output"]),
            reference=resolve(entry["reference"]),
            distortions=[resolve(p) for p in entry.get("distortions", [])],
        ))
    if not sources:
        raise ValueError("manifest lists no sources")
    n_p = len(sources[0].distortions)
    if any(len(s.distortions) != n_p for s in sources):
        raise ValueError("all sources must carry the same bank size")
    return sources


def load_waveform(path) -> np.ndarray:
    """Mono float waveform at the model rate."""
    rate, data = scipy.io.wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path} is not mono")
    if data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        x = data / 2147483648.0
    else:
        x = data.astype(np.float64)
    if rate != MODEL_RATE:
        from fractions import Fraction
        ratio = Fraction(MODEL_RATE, rate).limit_denominator(1000)
        x = scipy.signal.resample_poly(x, ratio.numerator, ratio.denominator)
    return x.astype(np.float32)


class _Encoder:
    """Wraps a loaded checkpoint: full-utterance hidden states at one layer."""

    def __init__(self, checkpoint: str, layer: int):
        import torch
        from transformers import AutoConfig, AutoModel

        torch.set_num_threads(1)  # keeps exports bit-reproducible
        self._torch = torch
        try:
            self.config = AutoConfig.from_pretrained(checkpoint)
            self.model = AutoModel.from_pretrained(checkpoint)
        except Exception as exc:
            raise CheckpointUnavailable(f"cannot load {checkpoint!r}: {exc}") from exc
        self.model.eval()
        n_layers = getattr(self.config, "num_hidden_layers", None)
        if n_layers is None or not 0 <= layer <= n_layers:
            raise LayerOutOfRange(
                f"layer {layer} outside 0..{n_layers} of {checkpoint!r}")
        self.layer = layer
        self.is_spectrogram = self.config.model_type == "audio-spectrogram-transformer"
        self.hidden_size = self.config.hidden_size

    @property
    def stride_ms(self) -> float:
        if self.is_spectrogram:
            return 100.0
        # waveform models: total convolutional stride in samples
        stride = int(np.prod(getattr(self.config, "conv_stride", [320])))
        return 1000.0 * stride / MODEL_RATE

    def hidden_states(self, waveform: np.ndarray) -> np.ndarray:
        """(T, hidden_size) hidden-state matrix at the model stride."""
        torch = self._torch
        with torch.no_grad():
            if self.is_spectrogram:
                return self._spectrogram_states(waveform)
            inputs = torch.from_numpy(waveform[None, :].astype(np.float32))
            out = self.model(inputs, output_hidden_states=True)
            return out.hidden_states[self.layer][0].numpy()

    def _spectrogram_states(self, waveform: np.ndarray) -> np.ndarray:
        # Patch tokens form a (frequency x time) grid after the two class
        # tokens; average over frequency and pool time patches to 100 ms.
        torch = self._torch
        from transformers import ASTFeatureExtractor

        extractor = ASTFeatureExtractor.from_pretrained(self.config.name_or_path)
        features = extractor(waveform, sampling_rate=MODEL_RATE,
                             return_tensors="pt")
        out = self.model(**features, output_hidden_states=True)
        states = out.hidden_states[self.layer][0].numpy()
        patches = states[2:]  # drop CLS and distillation tokens
        f_dim = (self.config.num_mel_bins - self.config.patch_size) \
            // self.config.frequency_stride + 1
        t_dim = patches.shape[0] // f_dim
        grid = patches[: f_dim * t_dim].reshape(t_dim, f_dim, -1)
        pooled = grid.mean(axis=1)
        # time patches advance 10 ms * time_stride; rebin to 100 ms
        patch_ms = 10.0 * self.config.time_stride
        per_bin = max(1, int(round(100.0 / patch_ms)))
        usable = (pooled.shape[0] // per_bin) * per_bin
        return pooled[:usable].reshape(-1, per_bin, pooled.shape[1]).mean(axis=1)


def export_embeddings(sources: list[SourceFiles], cfg: ExportConfig,
                      out_path) -> int:
    """Encode a manifest into one ``.mapssemb`` file; returns the frame count."""
    encoder = _Encoder(cfg.checkpoint, cfg.layer)
    waveforms = {}
    for s, files in enumerate(sources):
        waveforms[(s, KIND_OUTPUT, 0)] = load_waveform(files.output)
        waveforms[(s, KIND_REFERENCE, 0)] = load_waveform(files.reference)
        for p, path in enumerate(files.distortions, start=1):
            waveforms[(s, KIND_DISTORTION, p)] = load_waveform(path)

    lengths = {v.size for v in waveforms.values()}
    if len(lengths) != 1:
        raise ValueError(f"waveforms differ in length: {sorted(lengths)}")
    n_samples = lengths.pop()

    states = {key: encoder.hidden_states(wav) for key, wav in waveforms.items()}
    t_max = min(m.shape[0] for m in states.values())

    frame_len = int(round(cfg.frame_ms * MODEL_RATE / 1000.0))
    hop = int(round(cfg.hop_ms * MODEL_RATE / 1000.0))
    n_frames = max(0, (n_samples - frame_len) // hop + 1)

    labels = sorted(states, key=lambda k: (k[0], k[1] if k[1] != KIND_OUTPUT else -1,
                                           k[2]))
    frames = []
    for f in range(n_frames):
        idx = min(int(round(f * cfg.hop_ms / encoder.stride_ms)), t_max - 1)
        matrix = np.stack([states[key][idx] for key in labels])
        frames.append((f, labels, matrix))
    write_frames(out_path, frames)
    return n_frames
