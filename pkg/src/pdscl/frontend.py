"""Audio frontend: 8 s repeat-pad/truncate, 128-band log-Mel fbank, fixed normalization.

Also owns the two on-disk formats for audio data: 16-bit PCM WAV and the
``PDSF`` feature cache.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pdscl.core import SAMPLE_RATE

NORM_MEAN = -4.27
NORM_STD = 4.57

CACHE_MAGIC = b"PDSF"
CACHE_VERSION = 1


@dataclass(frozen=True)
class FrontendConfig:
    target_samples: int = 128000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 128
    fft_size: int = 512
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    norm_mean: float = NORM_MEAN
    norm_std: float = NORM_STD
    log_floor: float = 1e-10
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.fft_size < self.window_samples:
            raise ValueError("fft_size must be >= window length in samples")
        if not 0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate / 2:
            raise ValueError("need 0 <= fmin < fmax <= Nyquist")

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def n_frames(self) -> int:
        return 1 + (self.target_samples - self.window_samples) // self.hop_samples


DEFAULT_CONFIG = FrontendConfig()


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __len__(self):
        return len(self.samples)


def _as_samples(w) -> np.ndarray:
    if isinstance(w, Waveform):
        if w.sample_rate != SAMPLE_RATE:
            raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {w.sample_rate} Hz")
        w = w.samples
    return np.asarray(w, dtype=np.float64)


def standardize_duration(w, target_samples: int = DEFAULT_CONFIG.target_samples) -> Waveform:
    """Repeat-pad short clips end-to-end, keep the first ``target_samples`` of long ones."""
    x = _as_samples(w)
    if x.ndim != 1 or len(x) == 0:
        raise ValueError("waveform must be a non-empty 1-D signal")
    if len(x) >= target_samples:
        out = x[:target_samples].copy()
    else:
        reps = -(-target_samples // len(x))
        out = np.tile(x, reps)[:target_samples]
    return Waveform(out)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FrontendConfig = DEFAULT_CONFIG) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2))
    return edges[1:-1]


def _triangle(f, lo, mid, hi):
    f = np.asarray(f)
    up = (f - lo) / (mid - lo)
    down = (hi - f) / (hi - mid)
    return np.clip(np.minimum(up, down), 0.0, None)


@lru_cache(maxsize=8)
def _mel_filterbank(n_mels, fft_size, sample_rate, fmin_hz, fmax_hz) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))
    n_bins = fft_size // 2 + 1
    bin_hz = sample_rate / fft_size
    fb = np.zeros((n_mels, n_bins))
    # Each FFT bin is treated as the interval [k-1/2, k+1/2] * bin_hz and the
    # filter weight is the triangle's mean over that interval (exact trapezoid
    # over the breakpoints). Low filters narrower than one bin stay non-empty.
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        first = max(int(np.floor(lo / bin_hz - 0.5)), 0)
        last = min(int(np.ceil(hi / bin_hz + 0.5)), n_bins - 1)
        for k in range(first, last + 1):
            a = max((k - 0.5) * bin_hz, 0.0)
            b = min((k + 0.5) * bin_hz, sample_rate / 2)
            pts = [a, b] + [p for p in (lo, mid, hi) if a < p < b]
            pts = np.sort(pts)
            area = np.trapezoid(_triangle(pts, lo, mid, hi), pts)
            if area > 0.0:
                fb[m, k] = area / (b - a)
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: FrontendConfig = DEFAULT_CONFIG) -> np.ndarray:
    """(n_mels, fft_size//2 + 1) triangular HTK-mel weights."""
    return _mel_filterbank(cfg.n_mels, cfg.fft_size, cfg.sample_rate, cfg.fmin_hz, cfg.fmax_hz)


def compute_log_mel(w, cfg: FrontendConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Log-Mel fbank of a standardized clip, shape (frames, n_mels)."""
    x = _as_samples(w)
    if x.shape != (cfg.target_samples,):
        raise ValueError(
            f"expected a standardized clip of {cfg.target_samples} samples, got shape {x.shape}"
        )
    frames = sliding_window_view(x, cfg.window_samples)[:: cfg.hop_samples]
    frames = frames * np.hanning(cfg.window_samples + 2)[1:-1]
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    energies = power @ mel_filterbank(cfg).T
    return np.log(np.maximum(energies, cfg.log_floor))


def normalize_spectrogram(s, mean: float = NORM_MEAN, std: float = NORM_STD) -> np.ndarray:
    if std <= 0:
        raise ValueError("std must be positive")
    return (np.asarray(s, dtype=np.float64) - mean) / std


def extract_features(w, cfg: FrontendConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Full pipeline: standardize, log-Mel, normalize."""
    x = standardize_duration(w, cfg.target_samples)
    return normalize_spectrogram(compute_log_mel(x, cfg), cfg.norm_mean, cfg.norm_std)


# -- WAV -------------------------------------------------------------------


def read_wav(path) -> Waveform:
    """Read 16-bit PCM mono 16 kHz audio. Anything else is rejected, never resampled."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        if f.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, got {f.getframerate()} Hz")
        raw = f.readframes(f.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0)


def to_pcm16(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, w) -> None:
    pcm = to_pcm16(_as_samples(w))
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())


# -- feature cache ---------------------------------------------------------


def save_features(path, spec) -> None:
    """16-byte header (magic, version, frames, mels) + row-major little-endian float64."""
    spec = np.asarray(spec, dtype=np.float64)
    if spec.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    frames, mels = spec.shape
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC + struct.pack("<III", CACHE_VERSION, frames, mels))
        f.write(np.ascontiguousarray(spec, dtype="<f8").tobytes())


def load_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != CACHE_MAGIC:
            raise ValueError(f"{path}: not a PDSF feature file")
        version, frames, mels = struct.unpack("<III", header[4:])
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported PDSF version {version}")
        body = f.read()
    if len(body) != 8 * frames * mels:
        raise ValueError(f"{path}: truncated feature file")
    return np.frombuffer(body, dtype="<f8").reshape(frames, mels).astype(np.float64)
