"""Sample-domain reference detectors: NEO, ED-LPF and absolute threshold."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

MAD_TO_SIGMA = 0.6745


@dataclass(frozen=True)
class BaselineParams:
    """``neo_window`` is in samples; ``None`` means one 1 ms window at the
    recording's sample rate."""

    neo_window: int | None = None
    neo_thresh_mult: float = 6.0
    abs_mult: float = 4.0
    refractory_us: int = 1000

    def __post_init__(self):
        if self.neo_window is not None and self.neo_window < 1:
            raise ValueError("neo_window must be >= 1")
        if not (self.neo_thresh_mult > 0 and self.abs_mult > 0):
            raise ValueError("threshold multipliers must be positive")

    def window(self, sample_rate_hz: float) -> int:
        if self.neo_window is not None:
            return self.neo_window
        return max(1, int(round(1e-3 * sample_rate_hz)))


def neo(x) -> np.ndarray:
    """psi[n] = x[n]^2 - x[n-1] x[n+1]; the two end samples are zero."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 3:
        raise ValueError("NEO needs at least 3 samples")
    psi = np.zeros_like(x)
    psi[1:-1] = x[1:-1] ** 2 - x[:-2] * x[2:]
    return psi


def _rect_smooth(y, w, centred):
    k = np.full(w, 1.0 / w)
    if centred:
        return np.convolve(y, k, mode="same")
    return np.convolve(y, k)[: len(y)]


def ed_lpf(x, window: int = 24) -> np.ndarray:
    """Squared first difference through a causal unit-sum rectangular filter."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise ValueError("ED-LPF needs at least 2 samples")
    if window < 1:
        raise ValueError("window must be >= 1")
    d = np.zeros_like(x)
    d[1:] = np.diff(x)
    return _rect_smooth(d * d, window, centred=False)


def abs_threshold(x, abs_mult: float = 4.0) -> float:
    """``abs_mult * median(|x| / 0.6745)``."""
    return abs_mult * float(np.median(np.abs(np.asarray(x, dtype=np.float64)) / MAD_TO_SIGMA))


@njit(cache=True)
def _rising_crossings(y, thr, refractory_samples):
    out = np.empty(y.shape[0], np.int64)
    m = 0
    last = -(1 << 62)
    prev_above = True  # a trace that starts above threshold is not a crossing
    for i in range(y.shape[0]):
        above = y[i] > thr
        if above and not prev_above and i - last >= refractory_samples:
            out[m] = i
            m += 1
            last = i
        prev_above = above
    return out[:m]


def _samples_to_us(idx, fs):
    return np.rint(idx * (1e6 / fs)).astype(np.int64)


def _crossings_us(y, thr, fs, refractory_us):
    refr = refractory_us * fs / 1e6
    idx = _rising_crossings(np.ascontiguousarray(y, dtype=np.float64), float(thr), refr)
    return _samples_to_us(idx, fs)


def abs_threshold_detect(x, sample_rate_hz: float, abs_mult: float = 4.0,
                         refractory_us: int = 1000) -> np.ndarray:
    """Times (us) where |x| rises above the absolute threshold."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty signal")
    return _crossings_us(np.abs(x), abs_threshold(x, abs_mult), sample_rate_hz, refractory_us)


def smoothed_neo(x, window: int) -> np.ndarray:
    return _rect_smooth(neo(x), window, centred=True)


def neo_detect(x, sample_rate_hz: float, params: BaselineParams = BaselineParams()) -> np.ndarray:
    """Times (us) where the smoothed NEO rises above ``mult * mean``."""
    y = smoothed_neo(x, params.window(sample_rate_hz))
    thr = params.neo_thresh_mult * float(np.mean(y))
    if not thr > 0:
        return np.empty(0, np.int64)
    return _crossings_us(y, thr, sample_rate_hz, params.refractory_us)


def ed_lpf_detect(x, sample_rate_hz: float, params: BaselineParams = BaselineParams()) -> np.ndarray:
    y = ed_lpf(x, params.window(sample_rate_hz))
    thr = params.neo_thresh_mult * float(np.mean(y))
    if not thr > 0:
        return np.empty(0, np.int64)
    return _crossings_us(y, thr, sample_rate_hz, params.refractory_us)


def run_baseline(method: str, x, sample_rate_hz: float,
                 params: BaselineParams = BaselineParams()) -> np.ndarray:
    if method == "neo":
        return neo_detect(x, sample_rate_hz, params)
    if method == "edlpf":
        return ed_lpf_detect(x, sample_rate_hz, params)
    if method == "abs":
        return abs_threshold_detect(x, sample_rate_hz, params.abs_mult, params.refractory_us)
    raise ValueError(f"unknown baseline method {method!r}")
