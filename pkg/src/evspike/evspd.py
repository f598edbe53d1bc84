"""Event-based dual-threshold spike detection (reference, floating point).

Per channel, events are counted in bins of ``t_s_us`` regardless of polarity,
each count is binarized against ``thr1``, the bits are summed over the last
``n_s`` bins, and a spike is reported at the closing edge of the first bin
whose sum rises above ``thr2``. A refractory period then blocks further reports.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

PARAM_DOCS = {
    "t_s_us": "bin duration in microseconds",
    "n_s": "bins per moving-sum window (window = t_s_us * n_s)",
    "thr1": "per-bin event-count threshold; a bin is active when count > thr1",
    "thr2": "window threshold; detect when active bins in window > thr2",
    "refractory_us": "minimum spacing between reported spikes on one channel",
}


@dataclass(frozen=True)
class EvSpdParams:
    t_s_us: int = 125
    n_s: int = 8
    thr1: float = 3.0
    thr2: int = 3
    refractory_us: int = 1000

    def __post_init__(self):
        if self.t_s_us <= 0 or self.n_s < 1:
            raise ValueError("t_s_us and n_s must be positive")
        if not self.thr1 > 0:
            raise ValueError("thr1 must be positive")
        if not 1 <= self.thr2 <= self.n_s:
            raise ValueError(f"thr2 must lie in [1, {self.n_s}]")
        if self.refractory_us < 0:
            raise ValueError("refractory_us must be >= 0")

    @property
    def t_spk_us(self) -> int:
        return self.t_s_us * self.n_s

    def replace(self, **kw) -> "EvSpdParams":
        d = asdict(self)
        d.update(kw)
        return EvSpdParams(**d)

    def to_json(self) -> str:
        d = asdict(self)
        d["doc"] = PARAM_DOCS
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvSpdParams":
        d = {k: v for k, v in d.items() if k != "doc"}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown EvSpdParams keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "EvSpdParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def n_bins_for(t_us: np.ndarray, params: EvSpdParams, n_bins: int | None = None) -> int:
    if n_bins is not None:
        return int(n_bins)
    if len(t_us) == 0:
        return 0
    # the window keeps firing for up to n_s bins after the last event
    return int(t_us[-1] // params.t_s_us) + params.n_s


def bin_events(t_us, t_s_us: int, n_bins: int | None = None) -> np.ndarray:
    """Event count per half-open bin ``[i*t_s_us, (i+1)*t_s_us)``, polarity ignored."""
    t = np.asarray(t_us, dtype=np.int64)
    if n_bins is None:
        n_bins = int(t[-1] // t_s_us) + 1 if len(t) else 0
    b = t // t_s_us
    b = b[b < n_bins]
    return np.bincount(b, minlength=n_bins).astype(np.int64)


def threshold_bins(counts, thr1: float) -> np.ndarray:
    return (np.asarray(counts) > thr1).astype(np.int8)


def moving_sum(a, n_s: int) -> np.ndarray:
    """``s[i] = sum(a[i-n_s+1 .. i])`` with zeros before index 0."""
    if n_s < 1:
        raise ValueError("n_s must be >= 1")
    c = np.cumsum(np.asarray(a, dtype=np.int64))
    s = c.copy()
    s[n_s:] -= c[:-n_s]
    return s


class MovingSum:
    """Streaming counterpart of :func:`moving_sum`."""

    def __init__(self, n_s: int):
        if n_s < 1:
            raise ValueError("n_s must be >= 1")
        self.window = deque([0] * n_s, maxlen=n_s)
        self.total = 0

    def push(self, bit: int) -> int:
        self.total += bit - self.window[0]
        self.window.append(bit)
        return self.total


@njit(cache=True)
def _refractory_pick(fire_bins, t_s_us, refractory_us):
    # only the first bin of each run of consecutive firing bins can report
    out = np.empty(fire_bins.shape[0], np.int64)
    m = 0
    last = -(1 << 62)
    prev = -2
    for b in fire_bins:
        if b != prev + 1:
            t = (b + 1) * t_s_us
            if t - last >= refractory_us:
                out[m] = t
                m += 1
                last = t
        prev = b
    return out[:m]


def detections_from_sums(s, params: EvSpdParams) -> np.ndarray:
    """Spike times (us) from a moving-sum trace.

    A report is issued at the closing edge of a bin where ``s`` first rises
    above ``thr2``, unless it falls inside the refractory period.
    """
    fire = np.flatnonzero(np.asarray(s) > params.thr2).astype(np.int64)
    return _refractory_pick(fire, params.t_s_us, params.refractory_us)


def bin_sequences(t_us, params: EvSpdParams, n_bins: int | None = None):
    """``(evneo_short, a, s)`` for one channel."""
    t = np.asarray(t_us, dtype=np.int64)
    nb = n_bins_for(t, params, n_bins)
    counts = bin_events(t, params.t_s_us, nb)
    a = threshold_bins(counts, params.thr1)
    return counts, a, moving_sum(a, params.n_s)


def detect(t_us, params: EvSpdParams = EvSpdParams(), n_bins: int | None = None) -> np.ndarray:
    """Detect spikes on one channel's event times (polarity is irrelevant)."""
    _, _, s = bin_sequences(t_us, params, n_bins)
    return detections_from_sums(s, params)


def detect_channels(events: Sequence, params: EvSpdParams = EvSpdParams(),
                    n_bins: int | None = None) -> list[np.ndarray]:
    """:func:`detect` over per-channel event lists (arrays or ``(t_us, pol)`` pairs)."""
    out = []
    for ev in events:
        t = ev[0] if isinstance(ev, tuple) else ev
        out.append(detect(t, params, n_bins))
    return out


class EvSpdDetector:
    """Single-channel streaming detector fed one bin count at a time."""

    def __init__(self, params: EvSpdParams = EvSpdParams()):
        self.params = params
        self.sum = MovingSum(params.n_s)
        self.bin = 0
        self.last_spike = None
        self._above = False

    def push_bin(self, count: int) -> int | None:
        """Advance one bin; return a spike time in us or ``None``."""
        p = self.params
        s = self.sum.push(1 if count > p.thr1 else 0)
        t = (self.bin + 1) * p.t_s_us
        self.bin += 1
        rising = s > p.thr2 and not self._above
        self._above = s > p.thr2
        if rising and (self.last_spike is None or t - self.last_spike >= p.refractory_us):
            self.last_spike = t
            return t
        return None


# --------------------------------------------------------------------------
# threshold sweep


@dataclass
class SweepResult:
    thr1: np.ndarray
    thr2: np.ndarray
    accuracy: np.ndarray  # mean accuracy, shape (len(thr1), len(thr2))
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def argmax(self) -> tuple[float, int]:
        i, j = np.unravel_index(np.nanargmax(self.accuracy), self.accuracy.shape)
        return float(self.thr1[i]), int(self.thr2[j])

    @property
    def max_accuracy(self) -> float:
        return float(np.nanmax(self.accuracy))

    def plateau_fraction(self, within: float) -> float:
        """Fraction of cells within ``within`` (absolute) of the best cell."""
        return float(np.mean(self.accuracy >= self.max_accuracy - within))


def sweep_thresholds(events: Sequence, truth: Sequence, thr1_range, thr2_range,
                     params: EvSpdParams = EvSpdParams(), tolerance_us: int = 1000,
                     n_bins: int | None = None) -> SweepResult:
    """Accuracy grid over ``(thr1, thr2)``, averaged across channels."""
    from .evaluation import match_counts

    thr1s = np.asarray(list(thr1_range), dtype=float)
    thr2s = np.asarray(list(thr2_range), dtype=int)
    if thr1s.size == 0 or thr2s.size == 0:
        raise ValueError("threshold ranges must be non-empty")
    shape = (len(thr1s), len(thr2s), len(events))
    tp = np.zeros(shape, np.int64)
    fp = np.zeros(shape, np.int64)
    fn = np.zeros(shape, np.int64)
    for c, (ev, tr) in enumerate(zip(events, truth)):
        t = np.asarray(ev[0] if isinstance(ev, tuple) else ev, dtype=np.int64)
        nb = n_bins_for(t, params, n_bins)
        counts = bin_events(t, params.t_s_us, nb)
        tr = np.asarray(tr, dtype=np.int64)
        for i, t1 in enumerate(thr1s):
            s = moving_sum(counts > t1, params.n_s)
            for j, t2 in enumerate(thr2s):
                det = detections_from_sums(s, params.replace(thr1=t1, thr2=int(t2)))
                tp[i, j, c], fp[i, j, c], fn[i, j, c] = match_counts(tr, det, tolerance_us)
    from .evaluation import accuracy_array
    acc = np.nanmean(accuracy_array(tp, fp, fn), axis=2)
    return SweepResult(thr1s, thr2s, acc, tp.sum(2), fp.sum(2), fn.sum(2))
