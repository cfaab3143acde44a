"""Command-line surface: synthesis, evaluation, sweeps, gradient checks, plots.

Exit codes: 0 success, 1 internal numeric failure, 2 usage or input error.
Settings come from built-in defaults, overridden by a ``key = value`` config
file (``--config``), overridden by explicit flags; TEXTURIZER_SEED in the
environment overrides the seed from both.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import struct
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .audio_io import AudioIOError, _atomic_write, load_wav, normalize_peak, resample, save_wav
from .evaluation import VGGISH_NOTE, spectrogram_autocorr_score, spectrogram_diversity_score
from .feature_net import init_ensemble
from .losses import LagWindow, LossWeights, compute_target_statistics, next_shift_set, \
    ShiftSchedule, total_loss_and_grad
from .optimizer import NonFiniteLossError, SynthesisConfig, synthesize
from .spectrogram import LogSpectrogram, StftConfig, log_compress, stft_magnitude

SEED_ENV_VAR = "TEXTURIZER_SEED"


class UsageError(Exception):
    """Bad flags, config keys, or unreadable inputs."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def _parse_widths(text: str) -> tuple:
    try:
        widths = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise UsageError(f"bad widths list {text!r}") from exc
    if not widths:
        raise UsageError("widths list is empty")
    return widths


def _parse_optional_int(text: str):
    if text.strip().lower() in ("", "none", "auto"):
        return None
    return int(text)


# every key a config file may set, with its parser
_CONFIG_FIELDS = {
    "iterations": int,
    "diversity_iterations": int,
    "alpha": float,
    "beta": float,
    "min_lag": int,
    "max_lag": int,
    "griffin_lim_iterations": int,
    "widths": _parse_widths,
    "n_filters": int,
    "seed": int,
    "init_scale": float,
    "output_frames": _parse_optional_int,
    "sample_rate": int,
    "architecture": str,
    "shift_stride": int,
    "precision": str,
    "window_size": int,
    "hop_size": int,
    "input": str,
    "output": str,
    "report": str,
    "plot": _parse_bool,
    "plot_path": str,
}

_SYNTH_KEYS = ("iterations", "diversity_iterations", "alpha", "beta", "min_lag",
               "max_lag", "griffin_lim_iterations", "widths", "n_filters", "seed",
               "init_scale", "output_frames", "sample_rate", "architecture",
               "shift_stride", "precision")


def load_config_file(path) -> dict:
    """Parse a flat ``key = value`` file; '#' starts a comment. Unknown keys
    are errors so typos cannot silently change a run."""
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    settings = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _CONFIG_FIELDS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                settings[key] = _CONFIG_FIELDS[key](value)
            except (ValueError, TypeError) as exc:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return settings


def _merge_settings(args) -> dict:
    settings = {}
    if getattr(args, "config", None):
        settings.update(load_config_file(args.config))
    for key in _CONFIG_FIELDS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            settings["seed"] = int(env_seed)
        except ValueError as exc:
            raise UsageError(f"bad {SEED_ENV_VAR}: {env_seed!r}") from exc
    return settings


def _synthesis_config(settings: dict) -> SynthesisConfig:
    kwargs = {key: settings[key] for key in _SYNTH_KEYS if key in settings}
    stft_kwargs = {}
    if "window_size" in settings:
        stft_kwargs["window_size"] = settings["window_size"]
    if "hop_size" in settings:
        stft_kwargs["hop_size"] = settings["hop_size"]
    if stft_kwargs:
        kwargs["stft"] = StftConfig(**stft_kwargs)
    try:
        return SynthesisConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _analyze(clip, config: SynthesisConfig) -> LogSpectrogram:
    clip = resample(clip, config.sample_rate)
    clip = normalize_peak(clip)
    return log_compress(stft_magnitude(clip, config.stft), config.stft,
                        config.sample_rate)


# ---------------------------------------------------------------------------
# PNG emission (grayscale, one pixel per spectrogram cell)
# ---------------------------------------------------------------------------

def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def encode_gray_png(image: np.ndarray) -> bytes:
    """8-bit grayscale PNG bytes for a (height, width) uint8 array."""
    height, width = image.shape
    header = struct.pack(">IIBBBBB", width, height, 8, 0, 0, 0, 0)
    raw = b"".join(b"\x00" + row.tobytes() for row in np.ascontiguousarray(image))
    return (b"\x89PNG\r\n\x1a\n" + _png_chunk(b"IHDR", header)
            + _png_chunk(b"IDAT", zlib.compress(raw, 9)) + _png_chunk(b"IEND", b""))


def _spectrogram_pixels(spec) -> np.ndarray:
    values = np.asarray(getattr(spec, "values", spec), dtype=np.float64)
    top = float(values.max())
    if top <= 0:
        scaled = np.zeros_like(values)
    else:
        scaled = values / top
    # columns are frames, rows are bins with bin 0 at the bottom
    return np.rint(255.0 * scaled.T[::-1]).astype(np.uint8)


def render_spectrogram_png(spec, path) -> None:
    """Write a T x B grayscale image: one column per frame, bin 0 at the
    bottom, linear gray from 0 to the maximum value."""
    _atomic_write(path, encode_gray_png(_spectrogram_pixels(spec)))


def _render_pair_png(target_spec, synth_spec, path) -> None:
    left = _spectrogram_pixels(target_spec)
    right = _spectrogram_pixels(synth_spec)
    height = max(left.shape[0], right.shape[0])

    def pad(img):
        if img.shape[0] == height:
            return img
        return np.pad(img, ((height - img.shape[0], 0), (0, 0)))

    divider = np.full((height, 2), 128, dtype=np.uint8)
    _atomic_write(path, encode_gray_png(
        np.concatenate([pad(left), divider, pad(right)], axis=1)))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    settings = _merge_settings(args)
    if "input" not in settings or "output" not in settings:
        raise UsageError("synth requires --input and --output")
    config = _synthesis_config(settings)
    clip = load_wav(settings["input"])
    result = synthesize(clip, config)
    save_wav(result.audio, settings["output"])

    report = result.report.to_json_dict()
    report["config"]["input"] = settings["input"]
    report["config"]["output"] = settings["output"]
    report_path = settings.get("report", settings["output"] + ".report.json")
    _atomic_write(report_path, json.dumps(report, indent=2).encode())

    if settings.get("plot"):
        plot_path = settings.get("plot_path", settings["output"] + ".png")
        _render_pair_png(_analyze(clip, config), result.spectrogram, plot_path)

    print(f"wrote {settings['output']} ({result.audio.duration:.2f} s)")
    print(f"autocorr_score={result.report.autocorr_score:.6g} "
          f"diversity_score={result.report.diversity_score:.6g}")
    if result.report.trace:
        last = result.report.trace[-1]
        print(f"final losses: gram={last.gram:.6g} autocorr={last.autocorr:.6g} "
              f"diversity={last.diversity:.6g} total={last.total:.6g}")
    print(f"report: {report_path}")
    return 0


def cmd_eval(args) -> int:
    settings = _merge_settings(args)
    config = _synthesis_config(settings)
    spec_a = _analyze(load_wav(args.target), config)
    spec_b = _analyze(load_wav(args.synthesis), config)

    frames = min(spec_a.n_frames, spec_b.n_frames)
    truncated = spec_a.n_frames != spec_b.n_frames
    spec_a = LogSpectrogram(spec_a.values[:frames], config.stft, config.sample_rate)
    spec_b = LogSpectrogram(spec_b.values[:frames], config.stft, config.sample_rate)

    autocorr = spectrogram_autocorr_score(spec_b, spec_a, config.lag_window)
    diversity = spectrogram_diversity_score(spec_b, spec_a)

    payload = {
        "autocorr_score": autocorr,
        "diversity_score": diversity,
        "vggish_score": None,
        "vggish_score_note": VGGISH_NOTE,
        "target": args.target,
        "synthesis": args.synthesis,
        "frames_used": frames,
        "truncated": truncated,
    }
    print(f"autocorr_score={autocorr:.6g}")
    print(f"diversity_score={diversity:.6g}")
    if truncated:
        print(f"note: lengths differ; both spectrograms truncated to {frames} frames")
    if settings.get("report"):
        _atomic_write(settings["report"], json.dumps(payload, indent=2).encode())
        print(f"report: {settings['report']}")
    return 0


def _parse_grid(text, parser, name):
    if text is None:
        return None
    values = [parser(part) for part in text.split(",") if part.strip()]
    if not values:
        raise UsageError(f"{name} grid is empty")
    return values


def derive_run_seed(master_seed: int, run_index: int) -> int:
    """Stable per-run seed from the master seed and the flat run index."""
    state = np.random.SeedSequence([int(master_seed), int(run_index)])
    return int(state.generate_state(1)[0])


def _widths_up_to(max_width: int) -> tuple:
    if max_width < 2 or max_width & (max_width - 1):
        raise UsageError(f"max kernel width must be a power of 2 >= 2, got {max_width}")
    widths = []
    width = 2
    while width <= max_width:
        widths.append(width)
        width *= 2
    return tuple(widths)


SWEEP_COLUMNS = ["run", "alpha", "beta", "max_width", "n_filters", "replicate",
                 "seed", "iterations", "diversity_iterations", "min_lag",
                 "max_lag", "griffin_lim_iterations", "widths", "init_scale",
                 "output_frames", "sample_rate", "architecture", "shift_stride",
                 "precision", "window_size", "hop_size", "autocorr_score",
                 "diversity_score", "final_gram", "final_total", "wav",
                 "elapsed_s"]


def _sweep_run(payload):
    (run_index, input_path, out_dir, base_settings, alpha, beta, max_width,
     n_filters, replicate, seed) = payload
    settings = dict(base_settings)
    settings.update({"alpha": alpha, "beta": beta, "n_filters": n_filters,
                     "seed": seed})
    if max_width is not None:
        settings["widths"] = _widths_up_to(max_width)
    config = _synthesis_config(settings)
    clip = load_wav(input_path)
    result = synthesize(clip, config)

    wav_path = os.path.join(out_dir, f"run{run_index:04d}.wav")
    save_wav(result.audio, wav_path)
    report = result.report.to_json_dict()
    report["config"]["input"] = input_path
    report["config"]["output"] = wav_path
    _atomic_write(os.path.join(out_dir, f"run{run_index:04d}.report.json"),
                  json.dumps(report, indent=2).encode())

    last = result.report.trace[-1] if result.report.trace else None
    return {
        "run": run_index,
        "alpha": alpha,
        "beta": beta,
        "max_width": max_width if max_width is not None else max(config.widths),
        "n_filters": n_filters,
        "replicate": replicate,
        "seed": seed,
        "iterations": config.iterations,
        "diversity_iterations": config.diversity_iterations,
        "min_lag": config.min_lag,
        "max_lag": config.max_lag,
        "griffin_lim_iterations": config.griffin_lim_iterations,
        "widths": "|".join(str(w) for w in config.widths),
        "init_scale": config.init_scale,
        "output_frames": config.output_frames,
        "sample_rate": config.sample_rate,
        "architecture": config.architecture,
        "shift_stride": config.shift_stride,
        "precision": config.precision,
        "window_size": config.stft.window_size,
        "hop_size": config.stft.hop_size,
        "autocorr_score": result.report.autocorr_score,
        "diversity_score": result.report.diversity_score,
        "final_gram": last.gram if last else None,
        "final_total": last.total if last else None,
        "wav": wav_path,
        "elapsed_s": result.report.timing.get("total_s"),
    }


def cmd_sweep(args) -> int:
    settings = _merge_settings(args)
    if "input" not in settings:
        raise UsageError("sweep requires --input")
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    base = _synthesis_config(settings)

    alphas = _parse_grid(args.alpha_grid, float, "alpha") or [base.alpha]
    betas = _parse_grid(args.beta_grid, float, "beta") or [base.beta]
    max_widths = _parse_grid(args.max_width_grid, int, "max-width") or [None]
    filter_counts = _parse_grid(args.n_filters_grid, int, "n-filters") or [base.n_filters]
    replicates = args.replicates
    if replicates < 1:
        raise UsageError("--replicates must be >= 1")
    for width in max_widths:
        if width is not None:
            _widths_up_to(width)  # validate before launching runs

    runs = []
    run_index = 0
    for alpha in alphas:
        for beta in betas:
            for max_width in max_widths:
                for n_filters in filter_counts:
                    for replicate in range(replicates):
                        seed = derive_run_seed(settings.get("seed", base.seed),
                                               run_index)
                        runs.append((run_index, settings["input"], out_dir,
                                     settings, alpha, beta, max_width, n_filters,
                                     replicate, seed))
                        run_index += 1

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_run, runs))
    else:
        rows = [_sweep_run(run) for run in runs]
    rows.sort(key=lambda row: row["run"])

    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=SWEEP_COLUMNS)
    writer.writeheader()
    writer.writerows(rows)
    csv_path = args.csv or os.path.join(out_dir, "sweep.csv")
    _atomic_write(csv_path, buffer.getvalue().encode())
    print(f"{len(rows)} runs -> {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# Gradient self-check
# ---------------------------------------------------------------------------

def gradcheck_instance_safe(values, ensemble, targets, shifts) -> bool:
    """True when the instance sits safely away from ReLU kinks and diversity
    arg-max ties, so central differences see a smooth function."""
    from .feature_net import _preactivation
    from .losses import _diversity_distance, _forward_all

    kink = min(float(np.min(np.abs(_preactivation(net, values))))
               for net in ensemble.nets)
    if kink < 1e-3:
        return False
    features = _forward_all(ensemble, values)
    distances = sorted(_diversity_distance(features, targets, s) for s in shifts)
    if len(distances) > 1 and distances[1] - distances[0] < 1e-6 * (1 + distances[0]):
        return False
    return True


def run_gradient_check(n_frames=64, n_bins=9, widths=(2, 4), n_filters=8,
                       alpha=1.0, beta=1.0, instances=3, directions=10,
                       seed=0, corrupt=False):
    """Compare the analytic gradient of the total loss against central finite
    differences on random small instances. Returns the max relative error.

    Instances too close to a ReLU kink or a diversity arg-max tie are
    redrawn; the subgradient convention makes the analytic and numeric
    answers differ there by construction.
    """
    max_error = 0.0
    window = LagWindow(4, 16)
    instance_seed = seed
    produced = 0
    while produced < instances:
        root = np.random.SeedSequence([instance_seed, 0xC0FFEE])
        rng = np.random.Generator(np.random.PCG64(root))
        instance_seed += 1

        ensemble = init_ensemble(int(rng.integers(2**31)), widths, n_filters, n_bins)
        target_values = rng.uniform(0.5, 1.5, size=(n_frames, n_bins))
        values = rng.uniform(0.5, 1.5, size=(n_frames, n_bins))
        targets = compute_target_statistics(ensemble, target_values, window)
        schedule = ShiftSchedule()
        shifts = next_shift_set(schedule, n_frames, int(rng.integers(50)))
        weights = LossWeights(alpha, beta)
        include_diversity = beta > 0

        if not gradcheck_instance_safe(values, ensemble, targets, shifts):
            continue

        breakdown = total_loss_and_grad(values, ensemble, targets, weights,
                                        shifts, include_diversity)
        grad = breakdown.grad.copy()
        if corrupt:
            grad = grad + 1e-2 * (1.0 + np.abs(grad))

        def value_at(spec_values):
            return total_loss_and_grad(spec_values, ensemble, targets, weights,
                                       shifts, include_diversity).total

        eps = 1e-4
        for _ in range(directions):
            direction = rng.normal(size=values.shape)
            direction /= np.linalg.norm(direction)
            numeric = (value_at(values + eps * direction)
                       - value_at(values - eps * direction)) / (2 * eps)
            analytic = float(np.sum(grad * direction))
            error = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-12)
            max_error = max(max_error, error)
        produced += 1
    return max_error


def cmd_gradcheck(args) -> int:
    settings = _merge_settings(args)
    error = run_gradient_check(
        n_frames=args.frames, n_bins=args.bins,
        widths=settings.get("widths", (2, 4)),
        n_filters=settings.get("n_filters", 8),
        alpha=settings.get("alpha", 1.0), beta=settings.get("beta", 1.0),
        instances=args.instances, directions=args.directions,
        seed=settings.get("seed", 0), corrupt=args.corrupt_gradient)
    print(f"max relative gradient error: {error:.3e} (tolerance {args.tolerance:g})")
    return 0 if error <= args.tolerance else 1


def cmd_plot(args) -> int:
    settings = _merge_settings(args)
    config = _synthesis_config(settings)
    if "input" not in settings or "output" not in settings:
        raise UsageError("plot requires --input and --output")
    spec = _analyze(load_wav(settings["input"]), config)
    render_spectrogram_png(spec, settings["output"])
    print(f"wrote {settings['output']} ({spec.n_frames} x {spec.n_bins})")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_config_flags(parser, keys=_SYNTH_KEYS):
    parser.add_argument("--config", help="key = value settings file")
    for key in keys:
        flag = "--" + key.replace("_", "-")
        parser.add_argument(flag, dest=key, type=_CONFIG_FIELDS[key], default=None,
                            help=f"override {key}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="texturizer",
        description="Synthesize audio textures by matching random-CNN "
                    "spectrogram statistics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a texture from a target WAV")
    _add_config_flags(p)
    p.add_argument("--input", dest="input", default=None, help="target WAV path")
    p.add_argument("--output", dest="output", default=None, help="output WAV path")
    p.add_argument("--report", dest="report", default=None, help="JSON report path")
    p.add_argument("--plot", dest="plot", action="store_const", const=True,
                   default=None, help="also write side-by-side spectrogram PNG")
    p.add_argument("--plot-path", dest="plot_path", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score a synthesized WAV against its target")
    p.add_argument("target", help="target WAV")
    p.add_argument("synthesis", help="synthesized WAV")
    _add_config_flags(p, ("sample_rate", "min_lag", "max_lag", "window_size",
                          "hop_size"))
    p.add_argument("--report", dest="report", default=None, help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "sweep",
        help="grid of synthesis runs; one CSV row per run",
        description="Runs one synthesis per grid point (cartesian product of "
                    "the --*-grid lists, times --replicates). Each run gets an "
                    "independent seed derived from the master seed and the run "
                    "index. CSV columns: " + ", ".join(SWEEP_COLUMNS) + ".")
    _add_config_flags(p)
    p.add_argument("--input", dest="input", default=None, help="target WAV path")
    p.add_argument("--out-dir", required=True, help="directory for per-run outputs")
    p.add_argument("--csv", default=None, help="CSV path (default out-dir/sweep.csv)")
    p.add_argument("--alpha-grid", default=None, help="comma list of alpha values")
    p.add_argument("--beta-grid", default=None, help="comma list of beta values")
    p.add_argument("--max-width-grid", default=None,
                   help="comma list of maximum kernel widths (powers of 2)")
    p.add_argument("--n-filters-grid", default=None, help="comma list of filter counts")
    p.add_argument("--replicates", type=int, default=1, help="seeds per grid point")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradient")
    _add_config_flags(p, ("widths", "n_filters", "alpha", "beta", "seed"))
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--bins", type=int, default=9)
    p.add_argument("--instances", type=int, default=3)
    p.add_argument("--directions", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--corrupt-gradient", action="store_true",
                   help=argparse.SUPPRESS)  # negative-control test hook
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="render a WAV's log spectrogram to PNG")
    _add_config_flags(p, ("sample_rate", "window_size", "hop_size"))
    p.add_argument("--input", dest="input", default=None, help="WAV path")
    p.add_argument("--output", dest="output", default=None, help="PNG path")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (UsageError, AudioIOError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteLossError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
