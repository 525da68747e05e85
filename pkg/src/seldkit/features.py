"""Log-mel and mel-space intensity-vector features from FOA recordings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from seldkit.events import sph_to_cart

LOG_FLOOR = 1e-10
IV_EPS = 1e-10
CHANNEL_LAYOUT = ("logmel_w", "logmel_x", "logmel_y", "logmel_z", "iv_x", "iv_y", "iv_z")
LOGMEL_FILL = float(np.log(LOG_FLOOR))


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 24000
    n_fft: int = 1024
    hop: int = 400
    n_mels: int = 128
    f_min: float = 20.0
    f_max: float = 12000.0


class FoaClip:
    """Four-channel (w, x, y, z) recording."""

    __slots__ = ("samples", "sample_rate")

    def __init__(self, samples, sample_rate: int = 24000):
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 2 or samples.shape[0] != 4:
            raise ValueError(f"FOA clip needs shape (4, N), got {samples.shape}")
        if sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {sample_rate}")
        self.samples = samples
        self.sample_rate = int(sample_rate)

    def __len__(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def __repr__(self) -> str:
        return f"FoaClip(n={len(self)}, sample_rate={self.sample_rate})"


@dataclass
class ComplexSpectrogram:
    bins: np.ndarray  # channels x frames x (n_fft // 2 + 1)
    hop: int
    n_fft: int

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


def n_frames(n_samples: int, n_fft: int = 1024, hop: int = 400) -> int:
    if n_samples < n_fft:
        return 0
    return (n_samples - n_fft) // hop + 1


def get_window(window, n_fft: int) -> np.ndarray:
    if isinstance(window, str):
        if window in ("hann", "hanning"):
            # periodic Hann
            return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)
        if window in ("rect", "boxcar", "ones"):
            return np.ones(n_fft)
        raise ValueError(f"unknown window {window!r}")
    w = np.asarray(window, dtype=float)
    if w.shape != (n_fft,):
        raise ValueError(f"window length {w.shape} does not match n_fft={n_fft}")
    return w


def stft(clip, n_fft: int = 1024, hop: int = 400, window="hann") -> ComplexSpectrogram:
    """Per-channel STFT without centre padding.

    ``clip`` may be a FoaClip or any (channels, N) array.
    """
    x = clip.samples if isinstance(clip, FoaClip) else np.asarray(clip, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if n_fft <= 0 or n_fft & (n_fft - 1):
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    if not 0 < hop <= n_fft:
        raise ValueError(f"hop must be in (0, n_fft], got {hop}")
    if x.shape[1] < n_fft:
        raise ValueError(f"clip has {x.shape[1]} samples, shorter than one {n_fft}-point window")
    w = get_window(window, n_fft)
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft, axis=1)[:, ::hop, :]
    return ComplexSpectrogram(np.fft.rfft(frames * w, axis=-1), hop=hop, n_fft=n_fft)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=float)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=float)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@dataclass
class MelFilterbank:
    weights: np.ndarray  # n_mels x (n_fft // 2 + 1)
    f_min: float
    f_max: float
    center_hz: np.ndarray

    @property
    def n_fft(self) -> int:
        return 2 * (self.weights.shape[1] - 1)


def mel_filterbank(sample_rate: int = 24000, n_fft: int = 1024, n_mels: int = 128,
                   f_min: float = 20.0, f_max: float = 12000.0) -> MelFilterbank:
    """Triangular filters with unit apex (no area normalization)."""
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if not (0 <= f_min < f_max <= sample_rate / 2):
        raise ValueError(f"need 0 <= f_min < f_max <= {sample_rate / 2}, got [{f_min}, {f_max}]")
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    fdiff = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    return MelFilterbank(weights, float(f_min), float(f_max), edges[1:-1].copy())


def _check_fb(spec: ComplexSpectrogram, fb: MelFilterbank) -> None:
    if spec.bins.shape[-1] != fb.weights.shape[1]:
        raise ValueError(
            f"filterbank expects {fb.weights.shape[1]} bins, spectrogram has {spec.bins.shape[-1]}")


def mel_power(spec: ComplexSpectrogram, fb: MelFilterbank) -> np.ndarray:
    _check_fb(spec, fb)
    return (np.abs(spec.bins) ** 2) @ fb.weights.T


def logmel(spec: ComplexSpectrogram, fb: MelFilterbank) -> np.ndarray:
    """Natural-log mel power, clamped at LOG_FLOOR."""
    return np.log(np.maximum(mel_power(spec, fb), LOG_FLOOR))


def intensity_vectors(spec: ComplexSpectrogram, fb: MelFilterbank) -> np.ndarray:
    """Unit-normalized active intensity per time-mel cell, shape 3 x frames x n_mels.

    Cells where the omni channel's mel power is at or below LOG_FLOOR are zero.
    """
    _check_fb(spec, fb)
    if spec.bins.shape[0] != 4:
        raise ValueError(f"intensity vectors need 4 channels (w, x, y, z), got {spec.bins.shape[0]}")
    w = spec.bins[0]
    raw = np.real(np.conj(w)[None] * spec.bins[1:])
    iv = raw @ fb.weights.T
    norm = np.linalg.norm(iv, axis=0, keepdims=True)
    iv = iv / (norm + IV_EPS)
    silent = ((np.abs(w) ** 2) @ fb.weights.T) <= LOG_FLOOR
    iv[:, silent] = 0.0
    return iv


def extract_features(clip: FoaClip, config: FeatureConfig | None = None) -> np.ndarray:
    """Stack of 4 log-mel and 3 intensity-vector channels, 7 x frames x n_mels."""
    cfg = config or FeatureConfig()
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(f"clip sample rate {clip.sample_rate} != configured {cfg.sample_rate}")
    spec = stft(clip, cfg.n_fft, cfg.hop, "hann")
    fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.f_min, cfg.f_max)
    return np.concatenate([logmel(spec, fb), intensity_vectors(spec, fb)], axis=0)


def iv_direction(clip: FoaClip, config: FeatureConfig | None = None) -> np.ndarray:
    """Energy-weighted mean IV direction of a whole clip (unit vector)."""
    cfg = config or FeatureConfig()
    spec = stft(clip, cfg.n_fft, cfg.hop, "hann")
    fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.f_min, cfg.f_max)
    iv = intensity_vectors(spec, fb)
    weight = mel_power(ComplexSpectrogram(spec.bins[:1], spec.hop, spec.n_fft), fb)[0]
    v = (iv * weight[None]).sum(axis=(1, 2))
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def encode_plane_wave(signal, azimuth_deg: float, elevation_deg: float, sample_rate: int = 24000) -> FoaClip:
    """Ideal FOA encoding of a far-field source: w = s, (x, y, z) = s * u."""
    s = np.asarray(signal, dtype=float)
    u = sph_to_cart(azimuth_deg, elevation_deg)
    return FoaClip(np.vstack([s, u[0] * s, u[1] * s, u[2] * s]), sample_rate)
