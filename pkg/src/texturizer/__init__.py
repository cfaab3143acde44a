"""Audio texture synthesis by matching statistics of random convolutional
features of a log spectrogram, with Griffin-Lim inversion back to audio."""

from .audio_io import (
    AudioClip,
    AudioIOError,
    EmptyAudioError,
    MissingFileError,
    SilentAudioError,
    UnsupportedFormatError,
    load_wav,
    normalize_peak,
    resample,
    save_wav,
)
from .evaluation import (
    EvaluationReport,
    record_trace,
    spectrogram_autocorr_score,
    spectrogram_diversity_score,
)
from .feature_net import (
    ConvNet,
    FeatureEnsemble,
    StackedNet,
    StackedNetSpec,
    backward,
    backward_stacked,
    forward,
    forward_stacked,
    init_ensemble,
    init_stacked,
)
from .losses import (
    LagWindow,
    LossBreakdown,
    LossWeights,
    ShiftSchedule,
    TargetStatistics,
    autocorr_loss,
    autocorr_map,
    compute_target_statistics,
    diversity_loss,
    gram_loss,
    gram_matrix,
    next_shift_set,
    sendik_diversity_loss,
    total_loss_and_grad,
)
from .optimizer import (
    LbfgsbSolver,
    LbfgsConfig,
    NonFiniteLossError,
    SynthesisConfig,
    SynthesisResult,
    init_spectrogram,
    lbfgsb_minimize,
    synthesize,
)
from .spectrogram import (
    LogSpectrogram,
    StftConfig,
    griffin_lim,
    load_spectrogram,
    log_compress,
    log_decompress,
    save_spectrogram,
    spectral_convergence,
    stft_magnitude,
)

__version__ = "0.1.0"
