"""Shared fixtures and oracle-side helpers.

The WAV writers and the direct (quadratic-time) statistics here are kept
independent of the package code paths they are used to check.
"""

import struct
import zlib

import numpy as np
import pytest

from texturizer import AudioClip


def write_wav_raw(path, payload: bytes, fmt_code: int, channels: int, rate: int,
                  bits: int) -> None:
    """Hand-rolled RIFF writer, independent of texturizer.save_wav."""
    block_align = channels * bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, fmt_code, channels, rate,
                                    rate * block_align, block_align, bits)
    header += b"data" + struct.pack("<I", len(payload))
    with open(path, "wb") as fh:
        fh.write(header + payload)


def write_pcm16_wav(path, values, rate, channels=1):
    data = np.asarray(values, dtype="<i2").tobytes()
    write_wav_raw(path, data, 0x0001, channels, rate, 16)


def write_float32_wav(path, values, rate, channels=1):
    data = np.asarray(values, dtype="<f4").tobytes()
    write_wav_raw(path, data, 0x0003, channels, rate, 32)


def circshift(a, s):
    """Spec-style circular shift: out[t] = a[(t + s) % T]."""
    return np.roll(np.asarray(a), -s, axis=0)


def autocorr_direct(feature_map):
    """O(T^2) circular autocorrelation, the brute-force oracle."""
    feature_map = np.asarray(feature_map)
    n = feature_map.shape[0]
    out = np.zeros_like(feature_map, dtype=np.float64)
    for tau in range(n):
        for t in range(n):
            out[tau] += feature_map[t] * feature_map[(t + tau) % n]
    return out


def make_noise_clip(seconds=1.2, seed=0, rate=16000, amplitude=0.3):
    rng = np.random.default_rng(seed)
    samples = amplitude * rng.normal(size=int(seconds * rate))
    return AudioClip(np.clip(samples, -1, 1), rate)


def make_rich_clip(seconds=2.0, seed=1, rate=16000):
    """Noise plus tones plus a slow envelope; a stand-in for real audio."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * rate)) / rate
    samples = (0.35 * np.sin(2 * np.pi * 440.0 * t)
               + 0.2 * np.sin(2 * np.pi * 968.75 * t)
               + 0.25 * rng.normal(size=t.size)
               * (0.55 + 0.45 * np.sin(2 * np.pi * 1.5 * t)))
    return AudioClip(np.clip(samples, -1, 1), rate)


def make_click_train_clip(seconds=4.0, rate=16000, click_hz=2.0,
                          noise_level=0.005, seed=3):
    """Strictly periodic clicks over low-level noise; the rhythm fixture.

    Per-click amplitudes are randomized: a train of *identical* clicks can be
    quasi-copied by matching Gram statistics alone, which would hide the
    autocorrelation term's contribution to rhythm. The noise floor is kept
    well below the clicks: its mean log-magnitude adds a lag-independent
    pedestal to the autocorrelation that would otherwise swamp the rhythm
    component of the score (at 0.02 the rhythm carries under 2% of the
    windowed energy; at 0.005 it carries about half).
    """
    rng = np.random.default_rng(seed)
    n = int(seconds * rate)
    samples = noise_level * rng.normal(size=n)
    period = int(rate / click_hz)
    shape = np.hanning(96)
    for start in range(0, n - shape.size, period):
        samples[start:start + shape.size] += shape * rng.uniform(0.35, 0.95)
    return AudioClip(np.clip(samples, -1, 1), rate)


def decode_gray_png(blob: bytes) -> np.ndarray:
    """Minimal grayscale PNG decoder (filter 0 only), for checking emitted plots."""
    assert blob[:8] == b"\x89PNG\r\n\x1a\n"
    pos = 8
    width = height = None
    idat = b""
    while pos < len(blob):
        (length,) = struct.unpack(">I", blob[pos:pos + 4])
        tag = blob[pos + 4:pos + 8]
        payload = blob[pos + 8:pos + 8 + length]
        if tag == b"IHDR":
            width, height, depth, color = struct.unpack(">IIBB", payload[:10])
            assert depth == 8 and color == 0, "expected 8-bit grayscale"
        elif tag == b"IDAT":
            idat += payload
        pos += 12 + length
    raw = zlib.decompress(idat)
    rows = []
    stride = width + 1
    for r in range(height):
        line = raw[r * stride:(r + 1) * stride]
        assert line[0] == 0, "only filter type 0 is emitted"
        rows.append(np.frombuffer(line[1:], dtype=np.uint8))
    return np.stack(rows)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
