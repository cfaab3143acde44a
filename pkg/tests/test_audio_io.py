import numpy as np
import pytest

from conftest import write_float32_wav, write_pcm16_wav, write_wav_raw
from texturizer import (
    AudioClip,
    EmptyAudioError,
    MissingFileError,
    SilentAudioError,
    UnsupportedFormatError,
    load_wav,
    normalize_peak,
    resample,
    save_wav,
)


class TestLoadWav:
    def test_zero_pcm16_second(self, tmp_path):
        path = tmp_path / "zeros.wav"
        write_pcm16_wav(path, np.zeros(16000, dtype=np.int16), 16000)
        clip = load_wav(path)
        assert clip.sample_rate == 16000
        assert clip.samples.shape == (16000,)
        assert np.all(clip.samples == 0.0)

    def test_stereo_downmix_cancels(self, tmp_path):
        # +0.5 and -0.5 are exactly representable: +/-16384 / 32768
        path = tmp_path / "stereo.wav"
        interleaved = np.tile([16384, -16384], 500).astype(np.int16)
        write_pcm16_wav(path, interleaved, 8000, channels=2)
        clip = load_wav(path)
        assert clip.samples.shape == (500,)
        assert np.all(clip.samples == 0.0)

    def test_pcm16_full_scale_negative(self, tmp_path):
        path = tmp_path / "fs.wav"
        write_pcm16_wav(path, np.array([-32768, 0, 32767], dtype=np.int16), 16000)
        clip = load_wav(path)
        assert clip.samples[0] == -1.0  # -32768 / 32768
        assert clip.samples[2] == 32767 / 32768

    def test_float32(self, tmp_path):
        path = tmp_path / "f32.wav"
        write_float32_wav(path, np.array([0.25, -0.5, 1.0], dtype=np.float32), 22050)
        clip = load_wav(path)
        assert clip.sample_rate == 22050
        np.testing.assert_allclose(clip.samples, [0.25, -0.5, 1.0])

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_wav(tmp_path / "nope.wav")

    def test_unsupported_encoding(self, tmp_path):
        path = tmp_path / "mulaw.wav"
        write_wav_raw(path, b"\x00" * 100, fmt_code=0x0007, channels=1,
                      rate=8000, bits=8)
        with pytest.raises(UnsupportedFormatError):
            load_wav(path)

    def test_not_riff(self, tmp_path):
        path = tmp_path / "junk.wav"
        path.write_bytes(b"this is not audio at all")
        with pytest.raises(UnsupportedFormatError):
            load_wav(path)

    def test_zero_length_data(self, tmp_path):
        path = tmp_path / "empty.wav"
        write_pcm16_wav(path, np.zeros(0, dtype=np.int16), 16000)
        with pytest.raises(EmptyAudioError):
            load_wav(path)


class TestSaveWav:
    def test_zeros_round_trip(self, tmp_path):
        path = tmp_path / "z.wav"
        save_wav(AudioClip(np.zeros(100), 16000), path)
        clip = load_wav(path)
        assert np.all(clip.samples == 0.0)
        assert clip.sample_rate == 16000

    def test_out_of_range_clamps_to_max_code(self, tmp_path):
        path = tmp_path / "clip.wav"
        save_wav(AudioClip(np.array([2.0, -2.0]), 16000), path)
        raw = np.frombuffer(path.read_bytes()[-4:], dtype="<i2")
        assert raw[0] == 32767  # clamp to 1.0, then quantize saturates
        assert raw[1] == -32768

    def test_round_trip_quantization_bound(self, tmp_path, rng):
        path = tmp_path / "rt.wav"
        original = rng.uniform(-1.0, 1.0, size=4096)
        save_wav(AudioClip(original, 16000), path)
        recovered = load_wav(path).samples
        assert np.max(np.abs(recovered - original)) <= 1.0 / 32768


class TestResample:
    def test_identity(self):
        clip = AudioClip(np.arange(100) / 100.0, 16000)
        assert resample(clip, 16000) is clip

    def test_length_ratio(self):
        clip = AudioClip(np.zeros(8000), 8000)
        out = resample(clip, 16000)
        assert out.sample_rate == 16000
        assert out.samples.size == 16000

    def test_sine_survives_48k_to_16k(self):
        rate = 48000
        t = np.arange(4 * rate) / rate
        clip = AudioClip(0.5 * np.sin(2 * np.pi * 440.0 * t), rate)
        out = resample(clip, 16000)
        assert out.samples.size == 64000
        spectrum = np.abs(np.fft.rfft(out.samples * np.hanning(out.samples.size)))
        peak_hz = np.argmax(spectrum) * 16000 / out.samples.size
        assert abs(peak_hz - 440.0) < 1.0

    @pytest.mark.parametrize("src,dst", [(16000, 8000), (22050, 16000),
                                         (8000, 44100), (48000, 16000)])
    def test_rate_exact_and_length_rounded(self, src, dst, rng):
        clip = AudioClip(rng.normal(size=src // 2), src)
        out = resample(clip, dst)
        assert out.sample_rate == dst
        assert out.samples.size == round(clip.samples.size * dst / src)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            resample(AudioClip(np.ones(10), 8000), 0)


class TestNormalizePeak:
    def test_example_pair(self):
        out = normalize_peak(AudioClip(np.array([-0.5, 0.25]), 8000))
        np.testing.assert_allclose(out.samples, [-0.95, 0.475])

    def test_idempotent(self):
        clip = normalize_peak(AudioClip(np.array([0.3, -0.8, 0.1]), 8000))
        again = normalize_peak(clip)
        np.testing.assert_allclose(again.samples, clip.samples, atol=1e-12)

    def test_single_sample(self):
        out = normalize_peak(AudioClip(np.array([0.1]), 8000))
        np.testing.assert_allclose(out.samples, [0.95])

    def test_scale_invariance(self, rng):
        x = rng.normal(size=500)
        base = normalize_peak(AudioClip(x, 16000)).samples
        for factor in (1e-3, 0.5, 7.0, 1e4):
            scaled = normalize_peak(AudioClip(factor * x, 16000)).samples
            np.testing.assert_allclose(scaled, base, atol=1e-9)

    def test_all_zero_rejected(self):
        with pytest.raises(SilentAudioError):
            normalize_peak(AudioClip(np.zeros(10), 8000))


class TestAudioClip:
    def test_empty_rejected(self):
        with pytest.raises(EmptyAudioError):
            AudioClip(np.array([]), 16000)

    def test_bad_rate_rejected(self):
        with pytest.raises(ValueError):
            AudioClip(np.ones(4), 0)
