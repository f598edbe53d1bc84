"""Spike matching, detection metrics and firing-pattern comparison."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

DEFAULT_TOLERANCE_US = 1000
DEFAULT_PATTERN_BIN_US = 4000


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]] = field(default_factory=list)


@dataclass(frozen=True)
class Metrics:
    sensitivity: float | None
    fdr: float | None
    accuracy: float | None


@njit(cache=True)
def _greedy_match(truth, det, tol):
    # detections in time order; each takes the earliest unmatched truth in reach
    pairs = np.empty((min(truth.shape[0], det.shape[0]), 2), np.int64)
    j = 0
    m = 0
    nt = truth.shape[0]
    for d in det:
        while j < nt and truth[j] < d - tol:
            j += 1
        if j < nt and truth[j] <= d + tol:
            pairs[m, 0] = j
            pairs[m, 1] = d
            m += 1
            j += 1
    return pairs[:m]


def _as_i64(x):
    return np.ascontiguousarray(np.asarray(x, dtype=np.int64))


def match_spikes(truth, detected, tolerance_us: int = DEFAULT_TOLERANCE_US) -> MatchResult:
    """Greedy chronological one-to-one matching within ``+-tolerance_us``.

    Both inputs are sorted integer times. For equal-width windows on a line
    this greedy pass yields a maximum matching.
    """
    t, d = _as_i64(truth), _as_i64(detected)
    pairs = _greedy_match(t, d, int(tolerance_us))
    tp = len(pairs)
    return MatchResult(tp, len(d) - tp, len(t) - tp,
                       [(int(t[i]), int(x)) for i, x in pairs])


def match_counts(truth, detected, tolerance_us: int = DEFAULT_TOLERANCE_US) -> tuple[int, int, int]:
    """``(tp, fp, fn)`` without building the pair list."""
    t, d = _as_i64(truth), _as_i64(detected)
    tp = len(_greedy_match(t, d, int(tolerance_us)))
    return tp, len(d) - tp, len(t) - tp


def metrics(m: MatchResult) -> Metrics:
    """Sensitivity, FDR and accuracy; ``None`` where the denominator is zero."""
    tp, fp, fn = m.tp, m.fp, m.fn
    sens = tp / (tp + fn) if tp + fn else None
    fdr = fp / (tp + fp) if tp + fp else None
    acc = tp / (tp + fn + fp) if tp + fn + fp else None
    return Metrics(sens, fdr, acc)


def accuracy_array(tp, fp, fn) -> np.ndarray:
    """Elementwise accuracy with NaN for empty denominators."""
    tp, fp, fn = (np.asarray(a, dtype=float) for a in (tp, fp, fn))
    den = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, tp / np.where(den > 0, den, 1), np.nan)


def channel_accuracies(truth: Sequence, detected: Sequence,
                       tolerance_us: int = DEFAULT_TOLERANCE_US) -> np.ndarray:
    counts = np.array([match_counts(t, d, tolerance_us) for t, d in zip(truth, detected)],
                      dtype=np.int64).reshape(-1, 3)
    return accuracy_array(counts[:, 0], counts[:, 1], counts[:, 2])


# --------------------------------------------------------------------------
# firing patterns


@dataclass
class FiringPattern:
    counts: np.ndarray  # (channels, bins)
    bin_width_us: int = DEFAULT_PATTERN_BIN_US


def firing_pattern(detections: Sequence, bin_width_us: int = DEFAULT_PATTERN_BIN_US,
                   duration_us: int | None = None) -> FiringPattern:
    """Per-channel spike counts in fixed bins; a trailing partial bin is kept."""
    if bin_width_us <= 0:
        raise ValueError("bin_width_us must be positive")
    dets = [_as_i64(d) for d in detections]
    if duration_us is None:
        duration_us = max((int(d[-1]) + 1 for d in dets if len(d)), default=0)
    n_bins = -(-int(duration_us) // bin_width_us)
    F = np.zeros((len(dets), n_bins), dtype=np.int64)
    for ch, d in enumerate(dets):
        b = d // bin_width_us
        b = b[(b >= 0) & (b < n_bins)]
        F[ch] = np.bincount(b, minlength=n_bins)
    return FiringPattern(F, bin_width_us)


def pattern_mae(a, b) -> float:
    """Mean absolute difference between two equally shaped firing patterns."""
    A = a.counts if isinstance(a, FiringPattern) else np.asarray(a)
    B = b.counts if isinstance(b, FiringPattern) else np.asarray(b)
    if A.shape != B.shape:
        raise ValueError(f"pattern shapes differ: {A.shape} vs {B.shape}")
    if A.size == 0:
        return 0.0
    return float(np.abs(A.astype(np.int64) - B.astype(np.int64)).sum() / A.size)


@dataclass
class Similarity:
    per_channel: np.ndarray
    mean: float


def similarity(reference: Sequence, other: Sequence,
               tolerance_us: int = DEFAULT_TOLERANCE_US) -> Similarity:
    """Accuracy of ``other`` per channel, taking ``reference`` as ground truth.

    Channels where neither detector fired count as perfect agreement.
    """
    acc = channel_accuracies(reference, other, tolerance_us)
    acc = np.where(np.isnan(acc), 1.0, acc)
    return Similarity(acc, float(acc.mean()) if acc.size else float("nan"))
