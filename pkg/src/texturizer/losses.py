"""Texture statistics and the synthesis objective.

The total loss is

    total = gram + alpha * autocorr + beta * diversity

where the Gram term matches time-averaged filter co-activations, the
autocorrelation term matches per-filter circular autocorrelations over a lag
window (rhythm), and the diversity term penalizes reproducing the target as
an exact (possibly time-shifted) copy. ``total_loss_and_grad`` also returns
the exact reverse-mode gradient of the total with respect to the input
log-spectrogram, treating the diversity arg-max shift as fixed and the ReLU
subgradient at 0 as 0.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .feature_net import (
    ConvNet,
    FeatureEnsemble,
    StackedNet,
    fold_rolled_grad,
    forward,
    forward_stacked,
    rolled_stack,
)

DIVERSITY_EPSILON_SCALE = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Relative weights: alpha on the autocorrelation term, beta on diversity."""

    alpha: float = 1e3
    beta: float = 1e-4

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LagWindow:
    """Lag range (in frames, inclusive) over which autocorrelations are matched.

    Defaults are 50..500 frames: at hop 64 of 16 kHz audio one frame is 4 ms,
    so this covers lags of 200 ms to 2 s.
    """

    min_lag: int = 50
    max_lag: int = 500

    def __post_init__(self):
        if not (0 < self.min_lag <= self.max_lag):
            raise ValueError("need 0 < min_lag <= max_lag")

    def resolve(self, n_frames: int):
        """Clamp to the feasible lags for a map of ``n_frames`` frames.

        Returns (lo, hi) inclusive, or None when no lag in the window fits
        (n_frames <= min_lag), in which case the autocorrelation term is 0.
        """
        hi = min(self.max_lag, n_frames - 1)
        if hi < self.min_lag:
            return None
        return (self.min_lag, hi)


@dataclass(frozen=True)
class TargetStatistics:
    """Precomputed statistics of the target texture (the tilde quantities)."""

    features: tuple
    grams: tuple
    gram_norm_sq: float
    autocorr_windows: tuple   # per-map windowed target autocorrelation, or None
    lag_ranges: tuple         # per-map (lo, hi) inclusive, or None
    autocorr_norm_sq: float
    feature_norm_sq: float
    window: LagWindow
    shift_divisors: tuple     # per-map time-scale divisor for diversity shifts
    n_frames: int             # target frames at the spectrogram level
    output_frames: int        # synthesis frames at the spectrogram level

    @property
    def diversity_epsilon(self) -> float:
        return DIVERSITY_EPSILON_SCALE * self.feature_norm_sq


@dataclass(frozen=True)
class LossBreakdown:
    """Raw per-term values, the weighted total, and d(total)/d(spectrogram)."""

    gram: float
    autocorr: float
    diversity: float
    total: float
    grad: np.ndarray
    best_shift: int | None = None


def gram_matrix(feature_map: np.ndarray) -> np.ndarray:
    """Time-averaged outer product: G[mu, nu] = (1/T) sum_t F[t, mu] F[t, nu]."""
    feature_map = np.asarray(feature_map)
    if feature_map.ndim != 2 or feature_map.shape[0] < 1:
        raise ValueError(f"expected a non-empty T x M map, got {feature_map.shape}")
    return feature_map.T @ feature_map / feature_map.shape[0]


def autocorr_map(feature_map: np.ndarray) -> np.ndarray:
    """Circular per-filter autocorrelation A[tau, mu] = sum_t F[t] F[(t+tau) % T].

    Computed through the DFT: A = IDFT(|DFT(F)|^2), which is exact for the
    circular definition.
    """
    feature_map = np.asarray(feature_map)
    spectrum = np.fft.rfft(feature_map, axis=0)
    power = spectrum.real**2 + spectrum.imag**2
    return np.fft.irfft(power, n=feature_map.shape[0], axis=0)


def gram_loss(features, targets: TargetStatistics) -> float:
    """Sum of squared Gram mismatches over all nets, normalized by the total
    squared Frobenius norm of the target Grams."""
    if targets.gram_norm_sq == 0.0:
        raise ValueError("target Gram matrices are all zero; loss is undefined")
    num = 0.0
    for feature_map, target_gram in zip(features, targets.grams):
        diff = gram_matrix(feature_map) - target_gram
        num += float(np.sum(diff * diff))
    return num / targets.gram_norm_sq


def autocorr_loss(features, targets: TargetStatistics) -> float:
    """Windowed autocorrelation mismatch, normalized like the Gram term.

    Lags outside the window contribute nothing. If the window is infeasible
    for every map the loss is defined as 0.
    """
    if targets.autocorr_norm_sq == 0.0:
        if all(r is None for r in targets.lag_ranges):
            return 0.0
        raise ValueError("target autocorrelation is zero on the lag window")
    num = 0.0
    for feature_map, target_win, lag_range in zip(
            features, targets.autocorr_windows, targets.lag_ranges):
        if lag_range is None:
            continue
        lo, hi = lag_range
        residual = autocorr_map(feature_map)[lo:hi + 1] - target_win
        num += float(np.sum(residual * residual))
    return num / targets.autocorr_norm_sq


def sendik_diversity_loss(features, targets: TargetStatistics) -> float:
    """Unshifted diversity diagnostic: -sum (F - F_target)^2, always <= 0.

    Kept for instability diagnostics only; the optimized objective uses the
    shift-invariant ``diversity_loss``.
    """
    total = 0.0
    for feature_map, target_map in zip(features, targets.features):
        if feature_map.shape != target_map.shape:
            raise ValueError(
                f"shape mismatch {feature_map.shape} vs {target_map.shape}")
        diff = feature_map - target_map
        total += float(np.sum(diff * diff))
    return -total


def _shifted_rows(n_rows: int, shift: int, length: int) -> np.ndarray:
    return (np.arange(n_rows) + shift) % length


def _diversity_distance(features, targets: TargetStatistics, shift: int) -> float:
    """Exact squared distance between the shifted features and the target."""
    total = 0.0
    for feature_map, target_map, divisor in zip(
            features, targets.features, targets.shift_divisors):
        local = shift // divisor
        n_syn = feature_map.shape[0]
        n_tgt = target_map.shape[0]
        if n_syn == n_tgt:
            shifted = np.roll(feature_map, -local, axis=0) if local else feature_map
        else:
            shifted = feature_map[_shifted_rows(n_tgt, local, n_syn)]
        diff = shifted - target_map
        total += float(np.sum(diff * diff))
    return total


def _diversity_distance_profile(features, targets: TargetStatistics) -> np.ndarray:
    """Approximate D(s) for every shift at once via FFT cross-correlation.

    Only valid for unpooled, equal-length maps; used to preselect candidate
    shifts, which are then re-evaluated exactly.
    """
    n = features[0].shape[0]
    profile = np.zeros(n)
    for feature_map, target_map in zip(features, targets.features):
        f_hat = np.fft.rfft(feature_map, axis=0)
        t_hat = np.fft.rfft(target_map, axis=0)
        cross = np.fft.irfft(np.sum(f_hat * np.conj(t_hat), axis=1), n=n)
        profile += (np.sum(feature_map * feature_map)
                    + np.sum(target_map * target_map) - 2.0 * cross)
    return profile


def diversity_loss(features, targets: TargetStatistics, shifts,
                   epsilon: float | None = None):
    """Shift-invariant diversity term of the objective.

    Returns (value, best_shift) where

        value = max_s  Q / (epsilon + D(s)),
        D(s)  = sum over nets, times, filters of (F[(t+s) % T] - F_target[t])^2

    and Q is the total squared norm of the target features. ``epsilon``
    defaults to 1e-8 * Q, capping the value at 1e8 when the synthesis is an
    exact shifted copy. Ties pick the smallest shift.
    """
    shifts = sorted({int(s) for s in shifts})
    if not shifts:
        raise ValueError("shift set must be non-empty")
    limit = targets.output_frames
    if shifts[0] < 0 or shifts[-1] >= limit:
        raise ValueError(f"shifts must lie in [0, {limit - 1}]")
    if epsilon is None:
        epsilon = targets.diversity_epsilon

    plain = (all(d == 1 for d in targets.shift_divisors)
             and all(f.shape == t.shape for f, t in zip(features, targets.features)))
    if plain and len(shifts) > 32:
        # Rank shifts by the FFT profile, then confirm a handful exactly so
        # the returned value is free of FFT rounding (matters at the
        # exact-copy pole where D(s*) must come out as literally 0).
        profile = _diversity_distance_profile(features, targets)[shifts]
        order = np.argsort(profile, kind="stable")
        margin = 1e-6 * (abs(profile[order[0]]) + targets.feature_norm_sq)
        candidates = sorted(shifts[i] for i in order[:32]
                            if profile[i] <= profile[order[0]] + margin)
    else:
        candidates = shifts

    best_shift = None
    best_distance = np.inf
    for shift in candidates:
        distance = _diversity_distance(features, targets, shift)
        if distance < best_distance:
            best_distance = distance
            best_shift = shift
    return targets.feature_norm_sq / (epsilon + best_distance), best_shift


@dataclass
class ShiftSchedule:
    """Cycling shift sets for the diversity term.

    Each optimization step evaluates the stride-spaced shifts whose phase
    advances by one frame per step, plus the arg-max shifts recorded from the
    previous 10 evaluations.
    """

    stride: int = 50
    history: deque = field(default_factory=lambda: deque(maxlen=10))

    def record_best(self, shift: int) -> None:
        if shift is not None:
            self.history.append(int(shift))


def next_shift_set(state: ShiftSchedule, n_frames: int, step: int) -> tuple:
    base = set(range(step % state.stride, n_frames, state.stride))
    base.update(s for s in state.history if 0 <= s < n_frames)
    if not base:
        base = {0}
    return tuple(sorted(base))


def _forward_all(extractor, values: np.ndarray):
    if isinstance(extractor, FeatureEnsemble):
        stack = rolled_stack(values, extractor.max_width)
        features = []
        for net in extractor.nets:
            cols = net.kernel_width * net.in_channels
            pre = stack[:, :cols] @ net.flat_weights().astype(values.dtype, copy=False)
            features.append(np.maximum(pre, 0.0))
        return features
    if isinstance(extractor, StackedNet):
        return forward_stacked(extractor, values)
    if isinstance(extractor, ConvNet):
        return [forward(extractor, values)]
    raise TypeError(f"unsupported feature extractor: {type(extractor).__name__}")


def _expected_map_frames(extractor, n_frames: int):
    if isinstance(extractor, StackedNet):
        lengths = []
        current = n_frames
        for _ in extractor.layers:
            lengths.append(current)
            current = -(-current // 2)
        return lengths
    count = len(extractor.nets) if isinstance(extractor, FeatureEnsemble) else 1
    return [n_frames] * count


def compute_target_statistics(extractor, spec, window: LagWindow = LagWindow(),
                              output_frames: int | None = None) -> TargetStatistics:
    """Forward the target through the extractor and freeze its statistics.

    When the synthesis length differs from the target's, target
    autocorrelations are rescaled by the frame ratio (the circular
    autocorrelation of a stationary signal grows linearly with length).
    """
    values = np.asarray(getattr(spec, "values", spec))
    n_target = values.shape[0]
    n_output = int(output_frames) if output_frames is not None else n_target

    features = tuple(_forward_all(extractor, values))
    syn_lengths = _expected_map_frames(extractor, n_output)

    if isinstance(extractor, StackedNet):
        divisors = tuple(2 ** i for i in range(len(features)))
    else:
        divisors = tuple(1 for _ in features)

    grams = tuple(gram_matrix(f) for f in features)
    gram_norm_sq = float(sum(np.sum(g * g) for g in grams))

    autocorr_windows = []
    lag_ranges = []
    autocorr_norm_sq = 0.0
    for feature_map, n_syn in zip(features, syn_lengths):
        lag_range = window.resolve(min(feature_map.shape[0], n_syn))
        if lag_range is None:
            warnings.warn(
                f"lag window [{window.min_lag}, {window.max_lag}] infeasible for a "
                f"{feature_map.shape[0]}-frame map; its autocorrelation term is 0",
                RuntimeWarning)
            autocorr_windows.append(None)
            lag_ranges.append(None)
            continue
        lo, hi = lag_range
        target_win = autocorr_map(feature_map)[lo:hi + 1]
        if n_syn != feature_map.shape[0]:
            target_win = target_win * (n_syn / feature_map.shape[0])
        autocorr_windows.append(target_win)
        lag_ranges.append(lag_range)
        autocorr_norm_sq += float(np.sum(target_win * target_win))

    feature_norm_sq = float(sum(np.sum(f * f) for f in features))
    return TargetStatistics(
        features=features,
        grams=grams,
        gram_norm_sq=gram_norm_sq,
        autocorr_windows=tuple(autocorr_windows),
        lag_ranges=tuple(lag_ranges),
        autocorr_norm_sq=autocorr_norm_sq,
        feature_norm_sq=feature_norm_sq,
        window=window,
        shift_divisors=divisors,
        n_frames=n_target,
        output_frames=n_output,
    )


def _diversity_feature_grads(features, targets, best_shift, scale):
    """Per-map gradient of the diversity value at its fixed arg-max shift."""
    grads = []
    for feature_map, target_map, divisor in zip(
            features, targets.features, targets.shift_divisors):
        local = best_shift // divisor
        n_syn = feature_map.shape[0]
        n_tgt = target_map.shape[0]
        if n_syn == n_tgt:
            shifted = np.roll(feature_map, -local, axis=0) if local else feature_map
            residual = shifted - target_map
            grad = np.roll(residual, local, axis=0) if local else residual
            grads.append(scale * grad)
        else:
            rows = _shifted_rows(n_tgt, local, n_syn)
            residual = feature_map[rows] - target_map
            grad = np.zeros_like(feature_map)
            np.add.at(grad, rows, scale * residual)
            grads.append(grad)
    return grads


def total_loss_and_grad(spec, extractor, targets: TargetStatistics,
                        weights: LossWeights, shifts=None,
                        include_diversity: bool = False) -> LossBreakdown:
    """Evaluate the full objective and its gradient w.r.t. the spectrogram.

    The Gram and autocorrelation term values are always computed (they feed
    the loss-fraction traces); the diversity term is only computed when
    ``include_diversity`` is set, and is reported as 0 otherwise. Gradient
    contributions are skipped for terms whose weight is 0.
    """
    values = np.asarray(getattr(spec, "values", spec))
    if targets.gram_norm_sq == 0.0:
        raise ValueError("target Gram matrices are all zero; loss is undefined")

    features = _forward_all(extractor, values)

    # Term values and the per-map pieces their gradients reuse.
    gram_num = 0.0
    gram_diffs = []
    ac_num = 0.0
    ac_residuals = []
    spectra = []
    for feature_map, target_gram, target_win, lag_range in zip(
            features, targets.grams, targets.autocorr_windows, targets.lag_ranges):
        diff = gram_matrix(feature_map) - target_gram
        gram_diffs.append(diff)
        gram_num += float(np.sum(diff * diff))
        if lag_range is None:
            ac_residuals.append(None)
            spectra.append(None)
            continue
        lo, hi = lag_range
        spectrum = np.fft.rfft(feature_map, axis=0)
        power = spectrum.real**2 + spectrum.imag**2
        residual = np.fft.irfft(power, n=feature_map.shape[0], axis=0)[lo:hi + 1] - target_win
        ac_residuals.append(residual)
        spectra.append(spectrum)
        ac_num += float(np.sum(residual * residual))

    gram_value = gram_num / targets.gram_norm_sq
    ac_value = ac_num / targets.autocorr_norm_sq if targets.autocorr_norm_sq > 0 else 0.0

    div_value = 0.0
    best_shift = None
    div_grads = None
    if include_diversity:
        if shifts is None:
            raise ValueError("include_diversity requires a shift set")
        epsilon = targets.diversity_epsilon
        div_value, best_shift = diversity_loss(features, targets, shifts, epsilon)
        if weights.beta != 0.0:
            distance = targets.feature_norm_sq / div_value - epsilon
            scale = -2.0 * div_value / (epsilon + distance)
            div_grads = _diversity_feature_grads(features, targets, best_shift,
                                                 weights.beta * scale)

    # Assemble the weighted gradient per feature map, then pull back through
    # the extractor.
    feature_grads = []
    for i, feature_map in enumerate(features):
        n_frames = feature_map.shape[0]
        grad = (4.0 / (n_frames * targets.gram_norm_sq)) * (feature_map @ gram_diffs[i])
        if weights.alpha != 0.0 and ac_residuals[i] is not None:
            lo, hi = targets.lag_ranges[i]
            kernel = np.zeros_like(feature_map)
            kernel[lo:hi + 1] = (2.0 / targets.autocorr_norm_sq) * ac_residuals[i]
            correlated = np.fft.irfft(
                2.0 * np.fft.rfft(kernel, axis=0).real * spectra[i], n=n_frames, axis=0)
            grad += weights.alpha * correlated
        if div_grads is not None:
            grad += div_grads[i]
        feature_grads.append(grad)

    grad_spec = _pullback(extractor, values, features, feature_grads)
    total = gram_value + weights.alpha * ac_value + weights.beta * div_value
    return LossBreakdown(gram=gram_value, autocorr=ac_value, diversity=div_value,
                         total=total, grad=grad_spec, best_shift=best_shift)


def _pullback(extractor, values, features, feature_grads):
    if isinstance(extractor, FeatureEnsemble):
        n_frames, channels = values.shape
        width = extractor.max_width
        grad_stack = np.zeros((n_frames, width * channels), dtype=values.dtype)
        for net, feature_map, grad in zip(extractor.nets, features, feature_grads):
            cols = net.kernel_width * channels
            grad_pre = np.where(feature_map > 0, grad, 0.0)
            grad_stack[:, :cols] += grad_pre @ net.flat_weights().T.astype(
                values.dtype, copy=False)
        return fold_rolled_grad(grad_stack.reshape(n_frames, width, channels))
    if isinstance(extractor, StackedNet):
        grad_next = None
        for i in reversed(range(len(extractor.layers))):
            grad_feature = feature_grads[i]
            if grad_next is not None:
                grad_feature = grad_feature + _pool_backward(grad_next,
                                                             features[i].shape[0])
            grad_pre = np.where(features[i] > 0, grad_feature, 0.0)
            w0, w1 = extractor.layers[i]
            grad_next = (grad_pre @ w0.T.astype(values.dtype, copy=False)
                         + np.roll(grad_pre @ w1.T.astype(values.dtype, copy=False),
                                   1, axis=0))
        return grad_next
    raise TypeError(f"unsupported feature extractor: {type(extractor).__name__}")


def _pool_backward(grad, n_in):
    from .feature_net import _avg_pool2_backward
    return _avg_pool2_backward(grad, n_in)
