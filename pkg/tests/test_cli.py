import json

import numpy as np
import pytest

from conftest import decode_gray_png, make_noise_clip, make_rich_clip
from texturizer import LogSpectrogram, StftConfig, load_wav, save_wav
from texturizer.cli import (
    UsageError,
    derive_run_seed,
    load_config_file,
    main,
    render_spectrogram_png,
)


@pytest.fixture
def noise_wav(tmp_path):
    path = tmp_path / "noise.wav"
    save_wav(make_noise_clip(seconds=1.1, seed=21), path)
    return str(path)


FAST_FLAGS = ["--iterations", "10", "--diversity-iterations", "4",
              "--widths", "2,4", "--n-filters", "8",
              "--griffin-lim-iterations", "6", "--min-lag", "10",
              "--max-lag", "60", "--seed", "5"]


class TestSynthCommand:
    def test_deterministic_outputs(self, tmp_path, noise_wav, capsys):
        out_a = str(tmp_path / "a.wav")
        out_b = str(tmp_path / "b.wav")
        assert main(["synth", "--input", noise_wav, "--output", out_a,
                     *FAST_FLAGS]) == 0
        assert main(["synth", "--input", noise_wav, "--output", out_b,
                     *FAST_FLAGS]) == 0
        with open(out_a, "rb") as fa, open(out_b, "rb") as fb:
            assert fa.read() == fb.read()

    def test_report_written_and_reconstructible(self, tmp_path, noise_wav):
        out = str(tmp_path / "out.wav")
        report_path = str(tmp_path / "run.json")
        assert main(["synth", "--input", noise_wav, "--output", out,
                     "--report", report_path, *FAST_FLAGS]) == 0
        payload = json.loads(open(report_path).read())
        config = payload["config"]
        assert config["seed"] == 5
        assert config["widths"] == [2, 4]
        assert config["input"] == noise_wav
        assert config["prng"] == "numpy.PCG64"
        assert payload["vggish_score"] is None
        assert len(payload["trace"]) >= 2

    def test_zero_weights_zero_fractions(self, tmp_path, noise_wav):
        out = str(tmp_path / "out.wav")
        report_path = str(tmp_path / "run.json")
        assert main(["synth", "--input", noise_wav, "--output", out,
                     "--report", report_path, "--alpha", "0", "--beta", "0",
                     *FAST_FLAGS]) == 0
        payload = json.loads(open(report_path).read())
        for record in payload["trace"]:
            assert record["fraction_autocorr"] == 0.0
            assert record["fraction_diversity"] == 0.0

    def test_missing_input_exits_2(self, tmp_path, capsys):
        missing = str(tmp_path / "absent.wav")
        code = main(["synth", "--input", missing,
                     "--output", str(tmp_path / "o.wav"), *FAST_FLAGS])
        assert code == 2
        assert missing in capsys.readouterr().err

    def test_plot_emitted(self, tmp_path, noise_wav):
        out = str(tmp_path / "out.wav")
        assert main(["synth", "--input", noise_wav, "--output", out, "--plot",
                     *FAST_FLAGS]) == 0
        image = decode_gray_png(open(out + ".png", "rb").read())
        assert image.shape[0] == 257  # bins tall, target|divider|synth wide


class TestEvalCommand:
    def test_identical_files_zero_autocorr(self, tmp_path, noise_wav, capsys):
        report = str(tmp_path / "eval.json")
        assert main(["eval", noise_wav, noise_wav, "--report", report]) == 0
        payload = json.loads(open(report).read())
        assert payload["autocorr_score"] == 0.0
        assert payload["diversity_score"] == pytest.approx(1e8, rel=1e-6)
        assert payload["truncated"] is False
        assert "autocorr_score=0" in capsys.readouterr().out

    def test_length_mismatch_truncates_and_notes(self, tmp_path, capsys):
        a = tmp_path / "a.wav"
        b = tmp_path / "b.wav"
        save_wav(make_rich_clip(seconds=1.5, seed=1), a)
        save_wav(make_rich_clip(seconds=1.2, seed=1), b)
        report = str(tmp_path / "eval.json")
        assert main(["eval", str(a), str(b), "--report", report]) == 0
        payload = json.loads(open(report).read())
        assert payload["truncated"] is True
        assert "truncated" in capsys.readouterr().out

    def test_shifted_reconstruction_scores_as_near_copy(self, tmp_path):
        # shift the spectrogram by 13 frames, invert with Griffin-Lim, and
        # re-analyze: the score should sit far above the unrelated-pair level
        # (the exact cap is unreachable through a waveform round trip)
        from texturizer import griffin_lim, log_compress, log_decompress, \
            normalize_peak, stft_magnitude
        clip = normalize_peak(make_rich_clip(seconds=1.3, seed=8))
        spec = log_compress(stft_magnitude(clip))
        shifted = LogSpectrogram(np.roll(spec.values, -13, axis=0), spec.config,
                                 spec.sample_rate)
        recon = griffin_lim(log_decompress(shifted), 60, seed=4)
        a = tmp_path / "orig.wav"
        b = tmp_path / "shifted.wav"
        save_wav(clip, a)
        save_wav(recon, b)
        report = str(tmp_path / "eval.json")
        assert main(["eval", str(a), str(b), "--report", report]) == 0
        payload = json.loads(open(report).read())
        baseline = 0.5  # disjoint-support level
        assert payload["diversity_score"] > 20 * baseline


class TestSweepCommand:
    def test_grid_rows_and_columns(self, tmp_path, noise_wav):
        out_dir = str(tmp_path / "sweep")
        assert main(["sweep", "--input", noise_wav, "--out-dir", out_dir,
                     "--alpha-grid", "0,100", "--replicates", "2",
                     "--iterations", "6", "--diversity-iterations", "2",
                     "--widths", "2,4", "--n-filters", "8",
                     "--griffin-lim-iterations", "4", "--min-lag", "10",
                     "--max-lag", "60", "--seed", "9"]) == 0
        rows = list(_read_csv(tmp_path / "sweep" / "sweep.csv"))
        assert len(rows) == 4  # 2 alphas x 2 replicates
        from texturizer.cli import SWEEP_COLUMNS
        assert list(rows[0].keys()) == SWEEP_COLUMNS
        assert {row["alpha"] for row in rows} == {"0.0", "100.0"}
        seeds = [row["seed"] for row in rows]
        assert len(set(seeds)) == 4
        assert seeds[0] == str(derive_run_seed(9, 0))
        for row in rows:
            assert float(row["autocorr_score"]) >= 0.0
            assert (tmp_path / "sweep" / f"run{int(row['run']):04d}.wav").exists()

    def test_empty_grid_is_usage_error(self, tmp_path, noise_wav, capsys):
        code = main(["sweep", "--input", noise_wav,
                     "--out-dir", str(tmp_path / "s"), "--alpha-grid", ","])
        assert code == 2

    def test_bad_max_width(self, tmp_path, noise_wav):
        code = main(["sweep", "--input", noise_wav,
                     "--out-dir", str(tmp_path / "s"), "--max-width-grid", "3"])
        assert code == 2


class TestGradcheckCommand:
    def test_passes_on_default_instance(self, capsys):
        assert main(["gradcheck", "--frames", "48", "--bins", "7",
                     "--instances", "2", "--directions", "6", "--seed", "1"]) == 0
        assert "max relative gradient error" in capsys.readouterr().out

    def test_corrupted_gradient_fails(self):
        assert main(["gradcheck", "--frames", "48", "--bins", "7",
                     "--instances", "1", "--directions", "4", "--seed", "1",
                     "--corrupt-gradient"]) == 1

    def test_gram_only_path(self):
        assert main(["gradcheck", "--frames", "48", "--bins", "7",
                     "--instances", "1", "--directions", "4", "--seed", "1",
                     "--alpha", "0", "--beta", "0"]) == 0


class TestPlotCommand:
    def test_dimensions_match_spectrogram(self, tmp_path, noise_wav):
        png_path = str(tmp_path / "spec.png")
        assert main(["plot", "--input", noise_wav, "--output", png_path]) == 0
        image = decode_gray_png(open(png_path, "rb").read())
        clip = load_wav(noise_wav)
        n_frames = (clip.samples.size - 512) // 64 + 1
        assert image.shape == (257, n_frames)  # height = bins, width = frames


class TestRenderSpectrogramPng:
    def test_zero_spectrogram_all_black(self, tmp_path):
        spec = LogSpectrogram(np.zeros((12, 5)), StftConfig(8, 4), 16000)
        path = tmp_path / "zero.png"
        render_spectrogram_png(spec, path)
        image = decode_gray_png(path.read_bytes())
        assert image.shape == (5, 12)
        assert np.all(image == 0)

    def test_single_max_entry_single_white_pixel(self, tmp_path):
        values = np.zeros((12, 5))
        values[3, 1] = 7.0  # frame 3, bin 1
        spec = LogSpectrogram(values, StftConfig(8, 4), 16000)
        path = tmp_path / "dot.png"
        render_spectrogram_png(spec, path)
        image = decode_gray_png(path.read_bytes())
        assert np.sum(image == 255) == 1
        # bin 0 renders at the bottom row, so bin 1 is one row up
        assert image[5 - 1 - 1, 3] == 255

    def test_linear_gray_scale(self, tmp_path):
        values = np.zeros((4, 3))
        values[0, 0] = 2.0
        values[1, 0] = 1.0
        spec = LogSpectrogram(values, StftConfig(4, 2), 16000)
        path = tmp_path / "ramp.png"
        render_spectrogram_png(spec, path)
        image = decode_gray_png(path.read_bytes())
        assert image[2, 0] == 255
        assert image[2, 1] == 128  # rint(255 * 0.5)


class TestConfigHandling:
    def test_file_parsed_and_flag_wins(self, tmp_path, noise_wav):
        config_file = tmp_path / "run.conf"
        config_file.write_text(
            "# texture run\n"
            "iterations = 6\n"
            "diversity_iterations = 2\n"
            "widths = 2,4\n"
            "n_filters = 8\n"
            "griffin_lim_iterations = 4\n"
            "min_lag = 10\n"
            "max_lag = 60\n"
            "seed = 3\n")
        out = str(tmp_path / "o.wav")
        report = str(tmp_path / "r.json")
        assert main(["synth", "--config", str(config_file), "--input", noise_wav,
                     "--output", out, "--report", report, "--seed", "11"]) == 0
        payload = json.loads(open(report).read())
        assert payload["config"]["seed"] == 11      # flag beats file
        assert payload["config"]["iterations"] == 6  # file beats default

    def test_unknown_key_rejected(self, tmp_path):
        config_file = tmp_path / "bad.conf"
        config_file.write_text("iterationz = 6\n")
        with pytest.raises(UsageError):
            load_config_file(config_file)

    def test_unknown_key_exit_code(self, tmp_path, noise_wav):
        config_file = tmp_path / "bad.conf"
        config_file.write_text("iterationz = 6\n")
        assert main(["synth", "--config", str(config_file), "--input", noise_wav,
                     "--output", str(tmp_path / "o.wav")]) == 2

    def test_env_seed_overrides_flag(self, tmp_path, noise_wav, monkeypatch):
        monkeypatch.setenv("TEXTURIZER_SEED", "777")
        out = str(tmp_path / "o.wav")
        report = str(tmp_path / "r.json")
        assert main(["synth", "--input", noise_wav, "--output", out,
                     "--report", report, *FAST_FLAGS]) == 0
        payload = json.loads(open(report).read())
        assert payload["config"]["seed"] == 777

    def test_missing_config_file(self):
        with pytest.raises(UsageError):
            load_config_file("/nonexistent/path.conf")

    def test_derive_run_seed_stable(self):
        assert derive_run_seed(9, 0) == derive_run_seed(9, 0)
        assert derive_run_seed(9, 0) != derive_run_seed(9, 1)
        assert derive_run_seed(9, 0) != derive_run_seed(10, 0)


class TestArgparseBehavior:
    def test_no_command_exits_2(self):
        assert main([]) == 2

    def test_unknown_flag_exits_2(self):
        assert main(["synth", "--bogus", "1"]) == 2


def _read_csv(path):
    import csv

    with open(path) as fh:
        yield from csv.DictReader(fh)
