"""Bound-constrained L-BFGS and the end-to-end synthesis loop.

The optimizer is a limited-memory quasi-Newton method with lower-bound box
constraints: variables pinned at their bound with an outward-pointing
gradient are frozen out of the quasi-Newton direction, and the line search
walks the projected path so any number of variables can hit their bound in a
single step. The line search enforces strong Wolfe conditions.

A solver instance exposes one iteration at a time so the synthesis loop can
refresh the diversity shift schedule between iterations while keeping the
curvature memory, and drop that memory when the objective genuinely changes
(the diversity term switching off).
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .audio_io import AudioClip, normalize_peak, resample
from .evaluation import (
    EvaluationReport,
    record_trace,
    spectrogram_autocorr_score,
    spectrogram_diversity_score,
)
from .feature_net import (
    DEFAULT_N_FILTERS,
    DEFAULT_WIDTHS,
    PRNG_ALGORITHM,
    StackedNetSpec,
    init_ensemble,
    init_stacked,
)
from .losses import (
    LagWindow,
    LossWeights,
    ShiftSchedule,
    compute_target_statistics,
    next_shift_set,
    total_loss_and_grad,
)
from .spectrogram import (
    LogSpectrogram,
    StftConfig,
    griffin_lim,
    log_compress,
    log_decompress,
    stft_magnitude,
)


class NonFiniteLossError(RuntimeError):
    """The objective produced a non-finite value or gradient."""


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10                 # curvature pairs kept
    max_evaluations: int = 60        # objective evaluations per line search
    grad_tol: float = 1e-8           # projected-gradient infinity norm
    ftol_rel: float = 1e-12          # relative function decrease
    c1: float = 1e-4                 # Armijo (sufficient decrease)
    c2: float = 0.9                  # curvature

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if not (0 < self.c1 < self.c2 < 1):
            raise ValueError("need 0 < c1 < c2 < 1")


@dataclass
class StepResult:
    f: float
    converged: bool
    status: str
    n_evaluations: int
    stepped: bool
    aux: object = None


@dataclass
class MinimizeResult:
    x: np.ndarray
    trace: list
    converged: bool
    status: str
    n_iterations: int
    n_evaluations: int


def _evaluate(objective, x, context):
    out = objective(x)
    f, grad = out[0], out[1]
    aux = out[2] if len(out) > 2 else None
    f = float(f)
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if not np.isfinite(f) or not np.all(np.isfinite(grad)):
        raise NonFiniteLossError(f"non-finite objective at {context}")
    return f, grad, aux


class LbfgsbSolver:
    """Stateful stepper: one accepted quasi-Newton step per ``step`` call."""

    def __init__(self, x0, lower_bounds, config: LbfgsConfig = LbfgsConfig()):
        x0 = np.asarray(x0, dtype=np.float64).ravel().copy()
        self.lower = np.broadcast_to(
            np.asarray(lower_bounds, dtype=np.float64), x0.shape).copy()
        self.x = np.maximum(x0, self.lower)
        self.config = config
        self.pairs = deque(maxlen=config.memory)
        self.gamma = 1.0
        self.f = None
        self.grad = None
        self.aux = None
        self.n_evaluations = 0

    def reset_memory(self) -> None:
        """Forget curvature pairs (use when the objective changes shape)."""
        self.pairs.clear()
        self.gamma = 1.0

    def invalidate(self) -> None:
        """Mark the cached (f, grad) stale; the next step re-evaluates."""
        self.f = None
        self.grad = None
        self.aux = None

    def projected_gradient_norm(self) -> float:
        free = self.x > self.lower
        pg = np.where(free | (self.grad < 0), self.grad, 0.0)
        return float(np.max(np.abs(pg))) if pg.size else 0.0

    def _direction(self) -> np.ndarray:
        grad_free = np.where((self.x <= self.lower) & (self.grad > 0), 0.0, self.grad)
        q = grad_free.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        r = self.gamma * q
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * (y @ r)
            r += (a - b) * s
        d = -r
        # freeze active coordinates and never step into the wall from the bound
        d[(self.x <= self.lower) & (self.grad > 0)] = 0.0
        at_bound = self.x <= self.lower
        d[at_bound & (d < 0)] = 0.0
        if d @ self.grad >= 0:  # not a descent direction; fall back
            d = -grad_free
            d[at_bound & (d < 0)] = 0.0
        return d

    def ensure_evaluated(self, objective) -> float:
        if self.f is None:
            self.f, self.grad, self.aux = _evaluate(objective, self.x, "start point")
            self.n_evaluations += 1
        return self.f

    def step(self, objective, refresh: bool = False) -> StepResult:
        if refresh:
            self.invalidate()
        self.ensure_evaluated(objective)

        if self.projected_gradient_norm() <= self.config.grad_tol:
            return StepResult(self.f, True, "grad_tol", 0, False, self.aux)

        d = self._direction()
        dphi0 = float(d @ self.grad)
        if dphi0 >= 0:
            return StepResult(self.f, True, "stationary", 0, False, self.aux)

        alpha0 = 1.0
        if not self.pairs:
            # no curvature information yet: make the first probe move the
            # largest coordinate by 1, whatever the gradient's scale
            alpha0 = 1.0 / max(np.max(np.abs(d)), 1e-12)

        accepted, n_evals = self._line_search(objective, d, dphi0, alpha0)
        if accepted is None:
            return StepResult(self.f, False, "line_search_failed", n_evals, False,
                              self.aux)

        x_new, f_new, g_new, aux_new = accepted
        s = x_new - self.x
        y = g_new - self.grad
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            self.pairs.append((s, y, 1.0 / sy))
            self.gamma = sy / float(y @ y)

        f_prev = self.f
        self.x, self.f, self.grad, self.aux = x_new, f_new, g_new, aux_new

        if self.projected_gradient_norm() <= self.config.grad_tol:
            return StepResult(self.f, True, "grad_tol", n_evals, True, self.aux)
        if f_prev - f_new <= self.config.ftol_rel * max(abs(f_prev), abs(f_new), 1.0):
            return StepResult(self.f, True, "ftol", n_evals, True, self.aux)
        return StepResult(self.f, False, "ok", n_evals, True, self.aux)

    # -- strong Wolfe line search on the projected path ---------------------

    def _probe(self, objective, d, alpha):
        x = np.maximum(self.x + alpha * d, self.lower)
        f, g, aux = _evaluate(objective, x, f"line search alpha={alpha:g}")
        self.n_evaluations += 1
        armijo = f <= self.f + self.config.c1 * float(self.grad @ (x - self.x))
        dphi = float(g @ np.where(x > self.lower, d, 0.0))
        return x, f, g, aux, armijo, dphi

    def _line_search(self, objective, d, dphi0, alpha0):
        c2 = self.config.c2
        budget = self.config.max_evaluations
        n_evals = 0
        best = None  # fallback: best Armijo point seen

        lo = (0.0, self.f, dphi0, (self.x, self.f, self.grad, self.aux))
        hi = None
        alpha = alpha0
        alpha_prev, f_prev = 0.0, self.f

        while n_evals < budget:
            x, f, g, aux, armijo, dphi = self._probe(objective, d, alpha)
            n_evals += 1
            if armijo and (best is None or f < best[1]):
                best = (x, f, g, aux)
            if not armijo or f >= f_prev:
                hi = (alpha, f, dphi)
                break
            if abs(dphi) <= -c2 * dphi0:
                return (x, f, g, aux), n_evals
            if dphi >= 0:
                hi = (alpha_prev, f_prev, 0.0)
                lo = (alpha, f, dphi, (x, f, g, aux))
                break
            lo = (alpha, f, dphi, (x, f, g, aux))
            alpha_prev, f_prev = alpha, f
            alpha *= 2.0
        else:
            return (best, n_evals) if best else (None, n_evals)

        # zoom between lo (satisfies Armijo) and hi; quadratic interpolation
        # with a bisection safeguard localizes the Wolfe point quickly even
        # when the bracket spans orders of magnitude
        while n_evals < budget:
            a_lo = lo[0]
            a_hi = hi[0]
            span = a_hi - a_lo
            if abs(span) < 1e-14 * max(1.0, abs(a_hi)):
                break
            alpha = _interpolate_step(a_lo, lo[1], lo[2], a_hi, hi[1])
            if not (min(a_lo, a_hi) + 0.1 * abs(span) <= alpha
                    <= max(a_lo, a_hi) - 0.1 * abs(span)):
                alpha = a_lo + 0.5 * span
            x, f, g, aux, armijo, dphi = self._probe(objective, d, alpha)
            n_evals += 1
            if armijo and (best is None or f < best[1]):
                best = (x, f, g, aux)
            if not armijo or f >= lo[1]:
                hi = (alpha, f, dphi)
                continue
            if abs(dphi) <= -c2 * dphi0:
                return (x, f, g, aux), n_evals
            if dphi * (a_hi - a_lo) >= 0:
                hi = (a_lo, lo[1], lo[2])
            lo = (alpha, f, dphi, (x, f, g, aux))

        return (best, n_evals) if best else (None, n_evals)


def _interpolate_step(a_lo, f_lo, dphi_lo, a_hi, f_hi):
    """Minimizer of the quadratic through (a_lo, f_lo, dphi_lo) and (a_hi, f_hi)."""
    span = a_hi - a_lo
    denom = f_hi - f_lo - dphi_lo * span
    if denom == 0:
        return a_lo + 0.5 * span
    return a_lo - 0.5 * dphi_lo * span * span / denom


def lbfgsb_minimize(objective, x0, lower_bounds, config: LbfgsConfig = LbfgsConfig(),
                    max_iterations: int = 100) -> MinimizeResult:
    """Minimize ``objective`` subject to elementwise lower bounds.

    The objective returns (value, gradient). The trace records the value at
    the start point followed by each accepted value; accepted values decrease
    strictly (line-search internals are not reported).
    """
    solver = LbfgsbSolver(x0, lower_bounds, config)
    trace = [solver.ensure_evaluated(objective)]
    status = "max_iterations"
    converged = False
    iterations = 0
    for _ in range(max_iterations):
        result = solver.step(objective)
        iterations += 1
        if result.stepped:
            trace.append(result.f)
        if result.converged:
            converged = True
            status = result.status
            break
        if result.status == "line_search_failed":
            status = result.status
            break
    return MinimizeResult(solver.x.copy(), trace, converged, status,
                          iterations, solver.n_evaluations)


def init_spectrogram(target: LogSpectrogram, seed: int, init_scale: float = 0.01,
                     n_frames: int | None = None) -> LogSpectrogram:
    """Random starting point: i.i.d. uniform on [0, init_scale * mean(target)]."""
    shape = ((n_frames or target.n_frames), target.n_bins)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    high = init_scale * float(np.mean(target.values))
    values = rng.uniform(0.0, high, size=shape) if high > 0 else np.zeros(shape)
    return LogSpectrogram(values, target.config, target.sample_rate)


@dataclass(frozen=True)
class SynthesisConfig:
    iterations: int = 2000
    diversity_iterations: int = 100
    alpha: float = 1e3
    beta: float = 1e-4
    min_lag: int = 50
    max_lag: int = 500
    griffin_lim_iterations: int = 500
    widths: tuple = DEFAULT_WIDTHS
    n_filters: int = DEFAULT_N_FILTERS
    seed: int = 0
    init_scale: float = 0.01
    output_frames: int | None = None   # defaults to the target's frame count
    sample_rate: int = 16000
    architecture: str = "ensemble"     # "ensemble" or "stacked"
    shift_stride: int = 50
    precision: str = "float64"         # "float64" or "float32" hot path
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.iterations < 0 or self.diversity_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.diversity_iterations > self.iterations:
            raise ValueError("diversity_iterations must not exceed iterations")
        if self.architecture not in ("ensemble", "stacked"):
            raise ValueError(f"unknown architecture: {self.architecture}")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"unknown precision: {self.precision}")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    @property
    def lag_window(self) -> LagWindow:
        return LagWindow(self.min_lag, self.max_lag)


@dataclass
class SynthesisResult:
    audio: AudioClip
    spectrogram: LogSpectrogram
    report: EvaluationReport


def _build_extractor(config: SynthesisConfig, in_channels: int, seed: int):
    if config.architecture == "stacked":
        spec = StackedNetSpec(n_layers=len(config.widths), n_filters=config.n_filters,
                              in_channels=in_channels, seed=seed)
        return init_stacked(spec)
    return init_ensemble(seed, config.widths, config.n_filters, in_channels)


def synthesize(target: AudioClip, config: SynthesisConfig = SynthesisConfig(),
               initial_spectrogram: LogSpectrogram | None = None) -> SynthesisResult:
    """Run the full pipeline: analyze the target, optimize a new spectrogram
    to match its statistics, and invert it back to audio.

    Deterministic: identical config and seed give bit-identical spectrograms
    and audio. Raises NonFiniteLossError (with the failing iteration in the
    message) if the loss ever becomes non-finite.
    """
    timing = {}
    t_start = time.perf_counter()

    seed_ensemble, seed_init, seed_phase = [
        int(s.generate_state(1)[0])
        for s in np.random.SeedSequence(config.seed).spawn(3)]

    t0 = time.perf_counter()
    clip = resample(target, config.sample_rate)
    clip = normalize_peak(clip)
    if clip.samples.size < config.sample_rate:
        raise ValueError(
            f"target must be at least 1 s at {config.sample_rate} Hz after "
            f"resampling, got {clip.duration:.3f} s")
    target_spec = log_compress(stft_magnitude(clip, config.stft), config.stft,
                               config.sample_rate)
    timing["prepare_s"] = time.perf_counter() - t0

    dtype = np.float32 if config.precision == "float32" else np.float64
    n_frames = config.output_frames or target_spec.n_frames
    n_bins = target_spec.n_bins

    t0 = time.perf_counter()
    extractor = _build_extractor(config, n_bins, seed_ensemble)
    if dtype is np.float32:
        extractor = extractor.astype(dtype)
    targets = compute_target_statistics(
        extractor, target_spec.values.astype(dtype), config.lag_window, n_frames)
    timing["target_statistics_s"] = time.perf_counter() - t0

    if initial_spectrogram is not None:
        start = np.asarray(initial_spectrogram.values, dtype=np.float64)
        if start.shape != (n_frames, n_bins):
            raise ValueError(f"initial spectrogram must be {(n_frames, n_bins)}")
    else:
        start = init_spectrogram(target_spec, seed_init, config.init_scale,
                                 n_frames).values

    report = EvaluationReport(config=_config_echo(config, seed_ensemble, seed_init,
                                                  seed_phase))
    weights = config.weights
    schedule = ShiftSchedule(stride=config.shift_stride)
    solver = LbfgsbSolver(start.ravel(), 0.0)
    use_diversity = config.beta > 0

    def make_objective(shift_set, include_diversity):
        def objective(x):
            spec_values = x.reshape(n_frames, n_bins).astype(dtype)
            breakdown = total_loss_and_grad(spec_values, extractor, targets, weights,
                                            shift_set, include_diversity)
            return (breakdown.total,
                    breakdown.grad.astype(np.float64).ravel(),
                    breakdown)
        return objective

    t0 = time.perf_counter()
    last_breakdown = None
    for iteration in range(config.iterations):
        include_diversity = use_diversity and iteration < config.diversity_iterations
        if use_diversity and iteration == config.diversity_iterations:
            # the objective just changed shape; stale curvature would poison it
            solver.reset_memory()
            solver.invalidate()
        shift_set = (next_shift_set(schedule, n_frames, iteration)
                     if include_diversity else None)
        objective = make_objective(shift_set, include_diversity)
        try:
            if iteration == 0:
                # trace entry 0 is the loss at the starting point
                solver.ensure_evaluated(objective)
                record_trace(report, 0, solver.aux, weights)
            result = solver.step(objective,
                                 refresh=include_diversity and iteration > 0)
        except NonFiniteLossError as exc:
            context = (f"iteration {iteration}"
                       + (f", last terms gram={last_breakdown.gram:g} "
                          f"autocorr={last_breakdown.autocorr:g} "
                          f"diversity={last_breakdown.diversity:g}"
                          if last_breakdown else ""))
            raise NonFiniteLossError(f"{exc} ({context})") from exc
        breakdown = result.aux
        last_breakdown = breakdown
        if include_diversity:
            schedule.record_best(breakdown.best_shift)
        record_trace(report, iteration + 1, breakdown, weights)
        if not include_diversity and (result.converged
                                      or result.status == "line_search_failed"):
            break
    timing["optimize_s"] = time.perf_counter() - t0

    final_values = solver.x.reshape(n_frames, n_bins)
    synth_spec = LogSpectrogram(final_values, config.stft, config.sample_rate)

    t0 = time.perf_counter()
    cut = min(synth_spec.n_frames, target_spec.n_frames)
    report.autocorr_score = spectrogram_autocorr_score(
        _trim(synth_spec, cut), _trim(target_spec, cut), config.lag_window)
    report.diversity_score = spectrogram_diversity_score(
        _trim(synth_spec, cut), _trim(target_spec, cut))
    timing["evaluate_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    audio = griffin_lim(log_decompress(synth_spec), config.griffin_lim_iterations,
                        seed_phase, config.stft, config.sample_rate)
    if np.any(audio.samples != 0):
        audio = normalize_peak(audio)
    timing["griffin_lim_s"] = time.perf_counter() - t0

    timing["total_s"] = time.perf_counter() - t_start
    report.timing = timing
    return SynthesisResult(audio, synth_spec, report)


def _trim(spec: LogSpectrogram, n_frames: int) -> LogSpectrogram:
    if spec.n_frames == n_frames:
        return spec
    return LogSpectrogram(spec.values[:n_frames], spec.config, spec.sample_rate)


def _config_echo(config: SynthesisConfig, seed_ensemble, seed_init, seed_phase) -> dict:
    return {
        "iterations": config.iterations,
        "diversity_iterations": config.diversity_iterations,
        "alpha": config.alpha,
        "beta": config.beta,
        "min_lag": config.min_lag,
        "max_lag": config.max_lag,
        "griffin_lim_iterations": config.griffin_lim_iterations,
        "widths": list(config.widths),
        "n_filters": config.n_filters,
        "seed": config.seed,
        "init_scale": config.init_scale,
        "output_frames": config.output_frames,
        "sample_rate": config.sample_rate,
        "architecture": config.architecture,
        "shift_stride": config.shift_stride,
        "precision": config.precision,
        "window_size": config.stft.window_size,
        "hop_size": config.stft.hop_size,
        "window": config.stft.window,
        "prng": PRNG_ALGORITHM,
        "derived_seeds": {"ensemble": seed_ensemble, "init": seed_init,
                          "griffin_lim_phase": seed_phase},
    }
