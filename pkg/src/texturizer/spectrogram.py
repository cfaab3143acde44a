"""Log-magnitude STFT analysis and Griffin-Lim phase-retrieval synthesis.

The pipeline representation is log(1 + |STFT|) computed with a periodic Hann
window and no frame centering: frames start at 0, hop, 2*hop, ... and the
trailing remainder that does not fill a full window is dropped.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .audio_io import AudioClip, _atomic_write

SPECTROGRAM_MAGIC = b"LSPC"


@dataclass(frozen=True)
class StftConfig:
    """Analysis parameters. Hop must not exceed half the window so that
    magnitudes retain phase information implicitly."""

    window_size: int = 512
    hop_size: int = 64
    window: str = "hann"

    def __post_init__(self):
        if self.window_size % 2 != 0:
            raise ValueError("window_size must be even")
        if not (0 < self.hop_size <= self.window_size // 2):
            raise ValueError("hop_size must satisfy 0 < hop <= window_size / 2")
        if self.window != "hann":
            raise ValueError(f"unsupported window: {self.window}")

    @property
    def n_bins(self) -> int:
        return self.window_size // 2 + 1


@dataclass(frozen=True)
class LogSpectrogram:
    """T x B matrix of log(1 + magnitude) values, all entries >= 0."""

    values: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = 16000

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[0] < 1:
            raise ValueError(f"expected a T x B matrix with T >= 1, got {values.shape}")
        if values.shape[1] != self.config.n_bins:
            raise ValueError(
                f"bin count {values.shape[1]} does not match config "
                f"({self.config.n_bins} for window {self.config.window_size})")
        if float(values.min()) < 0:
            raise ValueError("log spectrogram entries must be nonnegative")
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window (sums to exactly n/2)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, config: StftConfig) -> int:
    return (n_samples - config.window_size) // config.hop_size + 1


def _frames(x: np.ndarray, config: StftConfig) -> np.ndarray:
    n_frames = frame_count(x.size, config)
    view = np.lib.stride_tricks.sliding_window_view(x, config.window_size)
    return view[::config.hop_size][:n_frames]


def _stft_complex(x: np.ndarray, config: StftConfig) -> np.ndarray:
    win = hann_window(config.window_size)
    return np.fft.rfft(_frames(x, config) * win, axis=1)


def stft_magnitude(clip: AudioClip, config: StftConfig = StftConfig()) -> np.ndarray:
    """Magnitude STFT of a clip: T x B with T = (n - window) // hop + 1."""
    if clip.samples.size < config.window_size:
        raise ValueError(
            f"clip has {clip.samples.size} samples, shorter than one "
            f"window ({config.window_size})")
    return np.abs(_stft_complex(clip.samples, config))


def log_compress(mag: np.ndarray, config: StftConfig = StftConfig(),
                 sample_rate: int = 16000) -> LogSpectrogram:
    """Entry-wise ln(1 + m)."""
    mag = np.asarray(mag)
    if np.any(mag < 0):
        raise ValueError("magnitudes must be nonnegative")
    return LogSpectrogram(np.log1p(mag), config, sample_rate)


def log_decompress(spec: LogSpectrogram) -> np.ndarray:
    """Entry-wise exp(s) - 1, clamped below at 0 against rounding."""
    return np.maximum(np.expm1(spec.values), 0.0)


def _istft_wls(coeffs: np.ndarray, config: StftConfig, n_samples: int,
               floor_ratio: float = 0.0) -> np.ndarray:
    """Least-squares inverse STFT: windowed overlap-add over squared-window sum.

    With ``floor_ratio=0`` this is the exact pseudo-inverse of the
    (fixed-grid) analysis operator, which is what makes the Griffin-Lim error
    non-increasing. The exact pseudo-inverse leaves the outermost samples
    nearly unconstrained (their window weight approaches 0), so the waveform
    handed back to callers is synthesized with the denominator floored at
    ``floor_ratio`` times its plateau, which suppresses edge blow-ups without
    touching the interior.
    """
    win = hann_window(config.window_size)
    frames = np.fft.irfft(coeffs, n=config.window_size, axis=1) * win
    hop = config.hop_size
    n_frames = coeffs.shape[0]
    k = config.window_size // hop

    # n_samples = (T-1)*hop + window is a multiple of hop, so overlap-add can
    # run as k strided block adds instead of a per-frame loop.
    acc = np.zeros(n_samples, dtype=frames.dtype).reshape(-1, hop)
    wsum = np.zeros(n_samples).reshape(-1, hop)
    w2 = win * win
    for j in range(k):
        acc[j:j + n_frames] += frames[:, j * hop:(j + 1) * hop]
        wsum[j:j + n_frames] += w2[j * hop:(j + 1) * hop]
    out = acc.ravel().copy()
    ws = wsum.ravel()
    if floor_ratio > 0:
        ws = np.maximum(ws, floor_ratio * float(ws.max()))
    covered = ws > 0
    out[covered] /= ws[covered]
    out[~covered] = 0.0
    return out


def spectral_convergence(mag: np.ndarray, target_mag: np.ndarray) -> float:
    """|| mag - target ||_F / || target ||_F, or 0 when the target is silent."""
    denom = float(np.linalg.norm(target_mag))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(mag - target_mag) / denom)


def griffin_lim(mag: np.ndarray, iterations: int, seed: int,
                config: StftConfig = StftConfig(), sample_rate: int = 16000,
                return_errors: bool = False):
    """Recover a waveform whose STFT magnitude approximates ``mag``.

    Phase is initialized uniformly at random in [-pi, pi) from ``seed``, then
    refined by alternating projections between the magnitude constraint and
    the set of consistent spectrograms. Deterministic for a fixed seed.

    Returns an AudioClip of length (T-1)*hop + window; with
    ``return_errors=True`` also returns the per-iteration spectral
    convergence trace.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    mag = np.asarray(mag, dtype=np.float64)
    if np.any(mag < 0):
        raise ValueError("magnitudes must be nonnegative")
    n_frames = mag.shape[0]
    n_samples = (n_frames - 1) * config.hop_size + config.window_size

    if not np.any(mag > 0):
        clip = AudioClip(np.zeros(n_samples), sample_rate)
        return (clip, np.zeros(iterations)) if return_errors else clip

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    phase = rng.uniform(-np.pi, np.pi, size=mag.shape)
    projected = mag * np.exp(1j * phase)
    x = _istft_wls(projected, config, n_samples)

    errors = np.empty(iterations)
    for i in range(iterations):
        coeffs = _stft_complex(x, config)
        amplitude = np.abs(coeffs)
        errors[i] = spectral_convergence(amplitude, mag)
        unit = np.where(amplitude > 0, coeffs / np.where(amplitude > 0, amplitude, 1.0), 0.0)
        projected = mag * unit
        x = _istft_wls(projected, config, n_samples)

    clip = AudioClip(_istft_wls(projected, config, n_samples, floor_ratio=1e-3),
                     sample_rate)
    return (clip, errors) if return_errors else clip


def save_spectrogram(spec: LogSpectrogram, path) -> None:
    """Debug dump: 16-byte header (magic, T, B, rate) + float32 row-major data."""
    t, b = spec.values.shape
    header = SPECTROGRAM_MAGIC + struct.pack("<III", t, b, spec.sample_rate)
    _atomic_write(path, header + spec.values.astype("<f4").tobytes())


def load_spectrogram(path, config: StftConfig | None = None) -> LogSpectrogram:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SPECTROGRAM_MAGIC:
        raise ValueError(f"not a spectrogram dump: {path}")
    t, b, rate = struct.unpack("<III", blob[4:16])
    values = np.frombuffer(blob[16:], dtype="<f4").astype(np.float64).reshape(t, b)
    if config is None:
        window = 2 * (b - 1)
        config = StftConfig(window_size=window, hop_size=max(1, window // 8))
    return LogSpectrogram(values, config, rate)
