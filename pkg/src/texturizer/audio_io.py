"""Mono audio I/O: WAV reading and writing, resampling, peak normalization.

Only RIFF/WAVE files with PCM-16 or IEEE float-32 samples are supported.
Multi-channel input is mixed down to mono by averaging channels.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np
from scipy.signal import upfirdn

PEAK_LEVEL = 0.95

_FMT_PCM = 0x0001
_FMT_IEEE_FLOAT = 0x0003
_FMT_EXTENSIBLE = 0xFFFE


class AudioIOError(Exception):
    """Base class for audio I/O failures."""


class MissingFileError(AudioIOError):
    """Input path does not exist."""


class UnsupportedFormatError(AudioIOError):
    """File is not a WAV we can decode (encoding, bit depth, structure)."""


class EmptyAudioError(AudioIOError):
    """File decodes to zero samples."""


class SilentAudioError(AudioIOError):
    """Operation is undefined on an all-zero signal."""


@dataclass(frozen=True)
class AudioClip:
    """A mono waveform: float samples (nominally in [-1, 1]) plus its rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        if samples.size == 0:
            raise EmptyAudioError("clip has no samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def _read_fmt_chunk(data: bytes):
    if len(data) < 16:
        raise UnsupportedFormatError("fmt chunk too short")
    fmt, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", data[:16])
    if fmt == _FMT_EXTENSIBLE:
        # format code lives in the first two bytes of the SubFormat GUID
        if len(data) < 26:
            raise UnsupportedFormatError("extensible fmt chunk too short")
        fmt = struct.unpack("<H", data[24:26])[0]
    return fmt, channels, rate, block_align, bits


def load_wav(path) -> AudioClip:
    """Read a PCM-16 or float-32 WAV file as a mono clip.

    PCM-16 samples are mapped to [-1, 1) by dividing by 32768. Multi-channel
    audio is averaged down to one channel.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise MissingFileError(f"no such file: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[0:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise UnsupportedFormatError(f"not a RIFF/WAVE file: {path}")

    fmt_info = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        cid = blob[pos:pos + 4]
        size = struct.unpack("<I", blob[pos + 4:pos + 8])[0]
        body = blob[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            fmt_info = _read_fmt_chunk(body)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt_info is None:
        raise UnsupportedFormatError(f"missing fmt chunk: {path}")
    if data is None:
        raise UnsupportedFormatError(f"missing data chunk: {path}")
    fmt, channels, rate, block_align, bits = fmt_info
    if channels < 1 or rate <= 0:
        raise UnsupportedFormatError(f"bad channel count or rate: {path}")

    if fmt == _FMT_PCM and bits == 16:
        width = 2
        raw = np.frombuffer(data[:len(data) - len(data) % (width * channels)], dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    elif fmt == _FMT_IEEE_FLOAT and bits == 32:
        width = 4
        raw = np.frombuffer(data[:len(data) - len(data) % (width * channels)], dtype="<f4")
        samples = raw.astype(np.float64)
    else:
        raise UnsupportedFormatError(
            f"unsupported encoding (format={fmt:#x}, bits={bits}): {path}")

    if samples.size == 0:
        raise EmptyAudioError(f"zero-length audio: {path}")
    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1)
    return AudioClip(samples, int(rate))


def save_wav(clip: AudioClip, path) -> None:
    """Write a clip as mono PCM-16. Samples are clamped to [-1, 1] first.

    The file is written atomically (temp file, then rename).
    """
    clamped = np.clip(clip.samples, -1.0, 1.0)
    quantized = np.clip(np.rint(clamped * 32768.0), -32768, 32767).astype("<i2")
    payload = quantized.tobytes()

    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, _FMT_PCM, 1, clip.sample_rate,
                                    clip.sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(payload))
    _atomic_write(path, header + payload)


def _atomic_write(path, blob: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase windowed-sinc resampling to ``target_rate``.

    Output length is round(n * target_rate / source_rate). The kernel is a
    Kaiser-windowed sinc with at least 32 taps per polyphase branch, so
    band-limited tones survive with their frequency intact.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return clip

    src = clip.sample_rate
    g = math.gcd(src, target_rate)
    up, down = target_rate // g, src // g
    max_rate = max(up, down)

    half = 16 * max_rate  # 32 taps per zero crossing => >= 32 taps per phase
    m = np.arange(-half, half + 1)
    cutoff = 1.0 / max_rate
    kernel = up * cutoff * np.sinc(cutoff * m) * np.kaiser(2 * half + 1, 8.6)

    # Zero-pad the kernel front so its group delay lands on the output grid.
    pre = (-half) % down
    if pre:
        kernel = np.concatenate([np.zeros(pre), kernel])
    offset = (half + pre) // down

    n_out = (2 * clip.samples.size * target_rate + src) // (2 * src)
    y = upfirdn(kernel, clip.samples, up=up, down=down)
    y = y[offset:offset + n_out]
    if y.size < n_out:
        y = np.concatenate([y, np.zeros(n_out - y.size)])
    return AudioClip(y, target_rate)


def normalize_peak(clip: AudioClip, peak: float = PEAK_LEVEL) -> AudioClip:
    """Scale the clip so its largest absolute sample equals ``peak``."""
    top = float(np.max(np.abs(clip.samples)))
    if top == 0.0:
        raise SilentAudioError("cannot normalize an all-zero clip")
    return AudioClip(clip.samples * (peak / top), clip.sample_rate)
