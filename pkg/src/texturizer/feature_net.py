"""Random single-layer convolutional feature extractors.

Each net is a one-dimensional convolution over time (circular padding, no
bias) followed by ReLU. Frequency bins act as input channels. Circular
padding makes every downstream statistic exactly invariant to circular time
shifts of the spectrogram. Weights are Glorot-uniform and a pure function of
the seed, so ensembles are bit-reproducible.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .audio_io import _atomic_write

DEFAULT_WIDTHS = (2, 4, 8, 16, 32, 64)
DEFAULT_N_FILTERS = 512
WEIGHTS_MAGIC = b"WNET"

PRNG_ALGORITHM = "numpy.PCG64"


def glorot_limit(kernel_width: int, in_channels: int, n_filters: int) -> float:
    """Uniform bound sqrt(6 / (fan_in + fan_out)) with convolutional fans."""
    fan_in = kernel_width * in_channels
    fan_out = kernel_width * n_filters
    return math.sqrt(6.0 / (fan_in + fan_out))


@dataclass(frozen=True)
class ConvNet:
    """One random conv net: weights of shape (kernel_width, in_channels, n_filters)."""

    weights: np.ndarray

    @property
    def kernel_width(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def n_filters(self) -> int:
        return self.weights.shape[2]

    def flat_weights(self) -> np.ndarray:
        # (width * in_channels, n_filters); row d*C+c matches column d*C+c of
        # the rolled input stack.
        w, c, f = self.weights.shape
        return self.weights.reshape(w * c, f)

    def astype(self, dtype) -> "ConvNet":
        return ConvNet(self.weights.astype(dtype))


@dataclass(frozen=True)
class FeatureEnsemble:
    nets: tuple

    @property
    def widths(self) -> tuple:
        return tuple(net.kernel_width for net in self.nets)

    @property
    def max_width(self) -> int:
        return max(self.widths)

    @property
    def in_channels(self) -> int:
        return self.nets[0].in_channels

    def astype(self, dtype) -> "FeatureEnsemble":
        return FeatureEnsemble(tuple(net.astype(dtype) for net in self.nets))


def init_ensemble(seed: int, widths=DEFAULT_WIDTHS, n_filters: int = DEFAULT_N_FILTERS,
                  in_channels: int = 257) -> FeatureEnsemble:
    """Build the ensemble of random nets, one per kernel width.

    Weights are i.i.d. uniform on [-L, L] with L the Glorot limit, drawn from
    per-net child streams of a single seed sequence. No bias terms.
    """
    widths = tuple(int(w) for w in widths)
    if not widths:
        raise ValueError("widths must be non-empty")
    if any(w < 1 for w in widths) or n_filters < 1 or in_channels < 1:
        raise ValueError("widths, n_filters and in_channels must all be >= 1")

    children = np.random.SeedSequence(seed).spawn(len(widths))
    nets = []
    for width, child in zip(widths, children):
        limit = glorot_limit(width, in_channels, n_filters)
        rng = np.random.Generator(np.random.PCG64(child))
        weights = rng.uniform(-limit, limit, size=(width, in_channels, n_filters))
        nets.append(ConvNet(weights))
    return FeatureEnsemble(tuple(nets))


def rolled_stack(values: np.ndarray, width: int) -> np.ndarray:
    """Stack circularly rolled copies of the input: out[t, d*C + c] = x[(t+d) % T, c].

    A net of kernel width w consumes the first w*C columns, so one stack at
    the maximum width serves the whole ensemble.
    """
    n_frames, channels = values.shape
    if width == 1:
        return values
    extended = np.concatenate([values, values[:width - 1]], axis=0)
    view = np.lib.stride_tricks.as_strided(
        extended,
        shape=(n_frames, width, channels),
        strides=(extended.strides[0], extended.strides[0], extended.strides[1]),
    )
    # materialize: reshaping the overlapping view in place would hand BLAS an
    # lda smaller than the row length, forcing matmul off its fast path
    return np.ascontiguousarray(view).reshape(n_frames, width * channels)


def _preactivation(net: ConvNet, values: np.ndarray, stack: np.ndarray | None = None) -> np.ndarray:
    if net.in_channels != values.shape[1]:
        raise ValueError(
            f"net expects {net.in_channels} channels, spectrogram has {values.shape[1]}")
    if stack is None:
        stack = rolled_stack(values, net.kernel_width)
    cols = net.kernel_width * net.in_channels
    return stack[:, :cols] @ net.flat_weights().astype(values.dtype, copy=False)


def forward(net: ConvNet, spec) -> np.ndarray:
    """ReLU(circular conv) feature map, shape (T, n_filters)."""
    values = _spec_values(spec)
    return np.maximum(_preactivation(net, values), 0.0)


def backward(net: ConvNet, spec, grad_output: np.ndarray) -> np.ndarray:
    """Adjoint of ``forward``: gradient of <grad_output, forward(spec)> w.r.t.
    the spectrogram. The ReLU subgradient at 0 is taken as 0."""
    values = _spec_values(spec)
    pre = _preactivation(net, values)
    if grad_output.shape != pre.shape:
        raise ValueError(f"grad shape {grad_output.shape} != feature shape {pre.shape}")
    grad_pre = np.where(pre > 0, grad_output, 0.0)
    return _conv_transpose(grad_pre, net)


def _conv_transpose(grad_pre: np.ndarray, net: ConvNet) -> np.ndarray:
    n_frames = grad_pre.shape[0]
    width, channels = net.kernel_width, net.in_channels
    flat = grad_pre @ net.flat_weights().T.astype(grad_pre.dtype, copy=False)
    return fold_rolled_grad(flat.reshape(n_frames, width, channels))


def fold_rolled_grad(grad_stack: np.ndarray) -> np.ndarray:
    """Collapse a (T, width, C) gradient on the rolled stack back onto the input.

    Contribution d lands at rows shifted forward by d, wrapping circularly.
    """
    n_frames, width, channels = grad_stack.shape
    acc = np.zeros((n_frames + width - 1, channels), dtype=grad_stack.dtype)
    for d in range(width):
        acc[d:d + n_frames] += grad_stack[:, d, :]
    out = acc[:n_frames].copy()
    if width > 1:
        out[:width - 1] += acc[n_frames:]
    return out


def _spec_values(spec) -> np.ndarray:
    values = getattr(spec, "values", spec)
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"expected a T x C matrix, got shape {values.shape}")
    return values


# ---------------------------------------------------------------------------
# Stacked variant: narrow conv layers separated by average pooling, matching
# the receptive-field ladder of the separate nets (2, 4, ..., 2^L frames).
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StackedNetSpec:
    n_layers: int = 6
    kernel_width: int = 2
    pool_size: int = 2
    pool_stride: int = 2
    n_filters: int = DEFAULT_N_FILTERS
    in_channels: int = 257
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.pool_size != 2 or self.pool_stride != 2 or self.kernel_width != 2:
            raise ValueError("only kernel_width=2 with 2/2 pooling is supported")


@dataclass(frozen=True)
class StackedNet:
    spec: StackedNetSpec
    layers: tuple  # per-layer weight tensors (kernel_width, C_in, n_filters)

    @property
    def in_channels(self) -> int:
        return self.spec.in_channels

    @property
    def min_frames(self) -> int:
        return 2 ** self.spec.n_layers

    def astype(self, dtype) -> "StackedNet":
        return StackedNet(self.spec, tuple(w.astype(dtype) for w in self.layers))


def init_stacked(spec: StackedNetSpec) -> StackedNet:
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_layers)
    layers = []
    c_in = spec.in_channels
    for child in children:
        limit = glorot_limit(spec.kernel_width, c_in, spec.n_filters)
        rng = np.random.Generator(np.random.PCG64(child))
        layers.append(rng.uniform(-limit, limit,
                                  size=(spec.kernel_width, c_in, spec.n_filters)))
        c_in = spec.n_filters
    return StackedNet(spec, tuple(layers))


def _conv2_circular(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    w0 = weights[0].astype(x.dtype, copy=False)
    w1 = weights[1].astype(x.dtype, copy=False)
    return x @ w0 + np.roll(x, -1, axis=0) @ w1


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    if n % 2 == 0:
        return 0.5 * (x[0::2] + x[1::2])
    pooled = 0.5 * (x[0:-1:2] + x[1::2])
    return np.concatenate([pooled, x[-1:]], axis=0)  # odd tail averages itself


def _avg_pool2_backward(grad: np.ndarray, n_in: int) -> np.ndarray:
    out = np.empty((n_in, grad.shape[1]), dtype=grad.dtype)
    if n_in % 2 == 0:
        out[0::2] = 0.5 * grad
        out[1::2] = 0.5 * grad
    else:
        out[0:-1:2] = 0.5 * grad[:-1]
        out[1::2] = 0.5 * grad[:-1]
        out[-1] = grad[-1]
    return out


def forward_stacked(net: StackedNet, spec) -> list:
    """Per-layer ReLU feature maps; pooling halves the frame count between
    layers, so layer i has ceil(T / 2**i) frames."""
    values = _spec_values(spec)
    if values.shape[1] != net.in_channels:
        raise ValueError(
            f"stacked net expects {net.in_channels} channels, got {values.shape[1]}")
    if values.shape[0] < net.min_frames:
        raise ValueError(
            f"need at least {net.min_frames} frames for {net.spec.n_layers} layers, "
            f"got {values.shape[0]}")
    outputs = []
    x = values
    for i, weights in enumerate(net.layers):
        feature = np.maximum(_conv2_circular(x, weights), 0.0)
        outputs.append(feature)
        if i + 1 < len(net.layers):
            x = _avg_pool2(feature)
    return outputs


def backward_stacked(net: StackedNet, spec, grad_outputs: list) -> np.ndarray:
    """Gradient of sum_i <grad_outputs[i], layer_i> w.r.t. the spectrogram."""
    values = _spec_values(spec)
    features = forward_stacked(net, values)
    inputs = [values]
    for feature in features[:-1]:
        inputs.append(_avg_pool2(feature))

    grad_next = None
    for i in reversed(range(len(net.layers))):
        grad_feature = np.asarray(grad_outputs[i], dtype=values.dtype)
        if grad_feature.shape != features[i].shape:
            raise ValueError(
                f"layer {i}: grad shape {grad_feature.shape} != {features[i].shape}")
        if grad_next is not None:
            grad_feature = grad_feature + _avg_pool2_backward(grad_next, features[i].shape[0])
        grad_pre = np.where(features[i] > 0, grad_feature, 0.0)
        w0, w1 = net.layers[i][0], net.layers[i][1]
        grad_next = (grad_pre @ w0.T.astype(grad_pre.dtype, copy=False)
                     + np.roll(grad_pre @ w1.T.astype(grad_pre.dtype, copy=False), 1, axis=0))
    return grad_next


def save_weights(net: ConvNet, path) -> None:
    """Debug dump: 16-byte header (magic, width, channels, filters) + float32 blob."""
    w, c, f = net.weights.shape
    header = WEIGHTS_MAGIC + struct.pack("<III", w, c, f)
    _atomic_write(path, header + net.weights.astype("<f4").tobytes())


def load_weights(path) -> ConvNet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"not a weight dump: {path}")
    w, c, f = struct.unpack("<III", blob[4:16])
    weights = np.frombuffer(blob[16:], dtype="<f4").astype(np.float64).reshape(w, c, f)
    return ConvNet(weights)
