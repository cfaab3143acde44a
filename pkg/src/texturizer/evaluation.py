"""Spectrogram-level quality scores and run reports.

The scores reuse the loss formulas with the spectrogram itself standing in
for the feature maps (frequency bins as channels): the autocorrelation score
measures how well rhythm was matched, the diversity score how close the
synthesis is to a (possibly time-shifted) copy of the target. Neither is
directly minimized by the optimizer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .losses import (
    DIVERSITY_EPSILON_SCALE,
    LagWindow,
    LossBreakdown,
    LossWeights,
    autocorr_map,
)

VGGISH_NOTE = ("not computed: requires a pretrained audio classifier, which is "
               "outside this artifact")


@dataclass
class TraceRecord:
    iteration: int
    gram: float
    autocorr: float
    diversity: float
    total: float
    fraction_gram: float
    fraction_autocorr: float
    fraction_diversity: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EvaluationReport:
    """Scores, per-iteration loss traces, config echo, and timings."""

    autocorr_score: float | None = None
    diversity_score: float | None = None
    vggish_score: None = None                  # see VGGISH_NOTE
    trace: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "autocorr_score": self.autocorr_score,
            "diversity_score": self.diversity_score,
            "vggish_score": None,
            "vggish_score_note": VGGISH_NOTE,
            "trace": [record.as_dict() for record in self.trace],
            "config": self.config,
            "timing": self.timing,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_json_dict(), indent=indent)


def record_trace(report: EvaluationReport, iteration: int,
                 breakdown: LossBreakdown, weights: LossWeights) -> EvaluationReport:
    """Append one optimization step to the report's loss trace.

    Fractions are of the weighted contributions (gram, alpha * autocorr,
    beta * diversity) relative to the total; all zero when the total is 0.
    """
    if report.trace and iteration <= report.trace[-1].iteration:
        raise ValueError(
            f"iterations must be appended in increasing order "
            f"(got {iteration} after {report.trace[-1].iteration})")
    weighted = (breakdown.gram, weights.alpha * breakdown.autocorr,
                weights.beta * breakdown.diversity)
    if breakdown.total > 0:
        fractions = tuple(term / breakdown.total for term in weighted)
    else:
        fractions = (0.0, 0.0, 0.0)
    report.trace.append(TraceRecord(
        iteration=iteration,
        gram=breakdown.gram,
        autocorr=breakdown.autocorr,
        diversity=breakdown.diversity,
        total=breakdown.total,
        fraction_gram=fractions[0],
        fraction_autocorr=fractions[1],
        fraction_diversity=fractions[2],
    ))
    return report


def _paired_values(synthesized, target):
    a = np.asarray(getattr(synthesized, "values", synthesized), dtype=np.float64)
    b = np.asarray(getattr(target, "values", target), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"spectrogram shapes differ: {a.shape} vs {b.shape}")
    return a, b


def spectrogram_autocorr_score(synthesized, target,
                               window: LagWindow = LagWindow()) -> float:
    """Windowed autocorrelation mismatch with bins as channels.

    Zero iff the synthesized spectrogram's circular autocorrelation matches
    the target's on every lag in the window; invariant to circular time
    shifts of either input.
    """
    syn, tgt = _paired_values(synthesized, target)
    lag_range = window.resolve(syn.shape[0])
    if lag_range is None:
        return 0.0
    lo, hi = lag_range
    target_auto = autocorr_map(tgt)[lo:hi + 1]
    denom = float(np.sum(target_auto * target_auto))
    if denom == 0.0:
        raise ValueError("target autocorrelation is zero on the lag window")
    residual = autocorr_map(syn)[lo:hi + 1] - target_auto
    return float(np.sum(residual * residual)) / denom


def spectrogram_diversity_score(synthesized, target,
                                epsilon: float | None = None) -> float:
    """Shift-invariant diversity value over the full shift set {0..T-1}.

    Higher means less diverse; hits the epsilon cap (1e8 by default) exactly
    when the synthesis is a circular time shift of the target.
    """
    from .losses import TargetStatistics, diversity_loss

    syn, tgt = _paired_values(synthesized, target)
    norm_sq = float(np.sum(tgt * tgt))
    targets = TargetStatistics(
        features=(tgt,),
        grams=(np.zeros((0, 0)),),
        gram_norm_sq=1.0,
        autocorr_windows=(None,),
        lag_ranges=(None,),
        autocorr_norm_sq=0.0,
        feature_norm_sq=norm_sq,
        window=LagWindow(),
        shift_divisors=(1,),
        n_frames=tgt.shape[0],
        output_frames=syn.shape[0],
    )
    if epsilon is None:
        epsilon = DIVERSITY_EPSILON_SCALE * norm_sq
    value, _ = diversity_loss((syn,), targets, range(syn.shape[0]), epsilon)
    return value
