"""Audio feature extraction, frame alignment, and token projection.

The feature extractor is an interface so a pretrained speech encoder could
drop in; the default is a deterministic log-mel filterbank at 16 kHz with a
20 ms hop (50 features per second), aligned to 25 fps video frames through
a sliding window and projected to a fixed set of context tokens.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .nn import ParamStore, linear
from .tensor import Tensor, ShapeError, gelu, softmax

__all__ = [
    "AudioFeatures",
    "AudioError",
    "LogMelExtractor",
    "AudioProjector",
    "load_wav",
    "load_raw_f32",
    "resample_linear",
    "align_windows",
]

SAMPLE_RATE = 16_000
FEATURE_RATE = 50  # 20 ms hop
N_MELS = 80
WIN_SAMPLES = 400  # 25 ms
HOP_SAMPLES = 320  # 20 ms
LOG_FLOOR = 1e-10


class AudioError(ValueError):
    """Invalid audio input (rate, channels, emptiness)."""


@dataclass(frozen=True)
class AudioFeatures:
    """Extractor output: (layers L, time T_a, channels c) at 50 features/s."""

    data: np.ndarray  # (L, T_a, c)
    sample_rate: int = SAMPLE_RATE
    feature_rate: int = FEATURE_RATE

    def __post_init__(self):
        if self.data.ndim != 3:
            raise AudioError(f"features must be (L, T, c), got {self.data.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioError(f"feature provenance must be {SAMPLE_RATE} Hz")


class FeatureExtractor(Protocol):
    def extract(self, waveform: np.ndarray) -> AudioFeatures: ...


def load_wav(path) -> tuple[np.ndarray, int]:
    """Read 16-bit PCM mono RIFF WAV; returns (float samples in [-1, 1], rate)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise AudioError(
                f"{path}: expected mono audio, got {wf.getnchannels()} channels"
            )
        if wf.getsampwidth() != 2:
            raise AudioError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        raw = wf.readframes(wf.getnframes())
        rate = wf.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def save_wav(path, samples: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.asarray(samples) * 32767.0, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(pcm.tobytes())


def load_raw_f32(path) -> np.ndarray:
    """Raw little-endian float32 mono samples (assumed 16 kHz)."""
    data = np.fromfile(str(path), dtype="<f4")
    if data.size == 0:
        raise AudioError(f"{path}: empty raw sample file")
    return data.astype(np.float64)


def resample_linear(samples: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    """Linear-interpolation resampler (caller-side rate normalization)."""
    if rate_in == rate_out:
        return np.asarray(samples, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    n_out = int(round(samples.size * rate_out / rate_in))
    t_out = np.arange(n_out) * (rate_in / rate_out)
    return np.interp(t_out, np.arange(samples.size), samples)


def _mel_filterbank(n_mels: int, n_fft: int, rate: int) -> np.ndarray:
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(rate / 2), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bins = np.floor((n_fft + 1) * hz_pts / rate).astype(int)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(1, n_mels + 1):
        lo, ctr, hi = bins[m - 1], bins[m], bins[m + 1]
        for k in range(lo, ctr):
            if ctr > lo:
                fb[m - 1, k] = (k - lo) / (ctr - lo)
        for k in range(ctr, hi):
            if hi > ctr:
                fb[m - 1, k] = (hi - k) / (hi - ctr)
    return fb


class LogMelExtractor:
    """Deterministic log-mel filterbank features: 80 channels, 25 ms window,
    20 ms hop, single layer (L = 1)."""

    def __init__(self, n_mels: int = N_MELS, n_fft: int = 512):
        self.n_mels = n_mels
        self.n_fft = n_fft
        self._fb = _mel_filterbank(n_mels, n_fft, SAMPLE_RATE)
        self._window = np.hanning(WIN_SAMPLES)

    def extract(self, waveform: np.ndarray, sample_rate: int = SAMPLE_RATE) -> AudioFeatures:
        waveform = np.asarray(waveform, dtype=np.float64)
        if waveform.ndim != 1:
            raise AudioError(f"waveform must be mono 1-D, got shape {waveform.shape}")
        if waveform.size == 0:
            raise AudioError("empty waveform")
        if sample_rate != SAMPLE_RATE:
            raise AudioError(
                f"expected {SAMPLE_RATE} Hz input, got {sample_rate}; resample first"
            )
        n_frames = int(np.ceil(waveform.size / HOP_SAMPLES))
        padded = np.pad(waveform, (0, n_frames * HOP_SAMPLES + WIN_SAMPLES - waveform.size))
        frames = np.stack(
            [padded[i * HOP_SAMPLES : i * HOP_SAMPLES + WIN_SAMPLES] for i in range(n_frames)]
        )
        spec = np.fft.rfft(frames * self._window, n=self.n_fft, axis=1)
        power = np.abs(spec) ** 2
        mel = power @ self._fb.T
        logmel = np.log(np.maximum(mel, LOG_FLOOR))
        return AudioFeatures(data=logmel[None, :, :])


def align_windows(
    feat: AudioFeatures, frames: int, video_fps: int = 25, window: int = 2
) -> np.ndarray:
    """Gather a sliding window of features for each video frame.

    Video frame f collects the feature frames covering video frames
    [f - window, f + window]; out-of-range rows are zero. Output shape is
    (frames, L * (2*window + 1) * k * c) with k = feature_rate / video_fps.
    """
    if feat.feature_rate % video_fps:
        raise AudioError(
            f"feature rate {feat.feature_rate} not an integer multiple of fps {video_fps}"
        )
    k = feat.feature_rate // video_fps
    layers, t_a, c = feat.data.shape
    span = (2 * window + 1) * k
    out = np.zeros((frames, layers, span, c), dtype=feat.data.dtype)
    for f in range(frames):
        start = (f - window) * k
        for j in range(span):
            src = start + j
            if 0 <= src < t_a:
                out[f, :, j, :] = feat.data[:, src, :]
    return out.reshape(frames, layers * span * c)


class AudioProjector:
    """Two-layer MLP mapping windowed features to per-frame context tokens.

    Input (B, F, m) -> (B, F, tokens, width). With multi-layer extractors the
    per-layer slices are combined by a learned softmax-weighted sum first.
    Biases start at zero so silence maps to zero tokens at initialization.
    """

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        feature_dim: int,
        hidden: int,
        tokens: int,
        width: int,
        layers: int = 1,
    ):
        if feature_dim % layers:
            raise AudioError(f"feature dim {feature_dim} not divisible by layers {layers}")
        self.layers = layers
        self.tokens = tokens
        self.width = width
        self.per_layer = feature_dim // layers
        self.w1 = store.trunc_normal(prefix + "w1", (self.per_layer, hidden))
        self.b1 = store.zeros(prefix + "b1", (hidden,))
        self.w2 = store.trunc_normal(prefix + "w2", (hidden, tokens * width))
        self.b2 = store.zeros(prefix + "b2", (tokens * width,))
        self.layer_logits = store.zeros(prefix + "layer_logits", (layers,)) if layers > 1 else None

    def forward(self, windowed: Tensor) -> Tensor:
        *lead, m = windowed.shape
        if m != self.per_layer * self.layers:
            raise ShapeError(
                f"windowed feature dim {m} != configured {self.per_layer * self.layers}"
            )
        x = windowed
        if self.layers > 1:
            x = x.reshape(*lead, self.layers, self.per_layer)
            weights = softmax(self.layer_logits, axis=-1).reshape(self.layers, 1)
            x = (x * weights).sum(axis=-2)
        h = gelu(linear(x, self.w1, self.b1))
        out = linear(h, self.w2, self.b2)
        return out.reshape(*lead, self.tokens, self.width)
