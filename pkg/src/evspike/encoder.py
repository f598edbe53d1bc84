"""Delta-modulation frontend and address-event streams.

A channel's pulses are ``(t_us, polarity)`` pairs. A multi-channel stream is
an :class:`EventStream` of three parallel arrays ordered by time, ties broken
by ascending address. The binary ``.aer`` layout is

    b"AER1" | u32 record count | count x (u32 t_us, u16 address, i8 polarity, u8 0)

all little-endian.
"""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from numba import njit

from .dataset import Recording

log = logging.getLogger(__name__)

MAX_CHANNELS = 1024
BANK_BITS = 3
CHANNEL_BITS = 7
DEFAULT_FALLBACK_THRESHOLD = 0.1

AER_MAGIC = b"AER1"
AER_RECORD = np.dtype([("t_us", "<u4"), ("address", "<u2"), ("polarity", "i1"), ("reserved", "u1")])


class AerEvent(NamedTuple):
    t_us: int
    address: int
    polarity: int

    @property
    def bank(self) -> int:
        return self.address >> CHANNEL_BITS

    @property
    def channel_in_bank(self) -> int:
        return self.address & ((1 << CHANNEL_BITS) - 1)


def make_address(bank: int, channel_in_bank: int) -> int:
    if not (0 <= bank < 1 << BANK_BITS and 0 <= channel_in_bank < 1 << CHANNEL_BITS):
        raise ValueError("bank must be in [0,7] and channel in [0,127]")
    return (bank << CHANNEL_BITS) | channel_in_bank


# --------------------------------------------------------------------------
# delta modulation


@njit(cache=True)
def _delta_kernel(x, threshold, us_per_sample, v_level0, i0, last_t0):
    n = x.shape[0]
    cap = 64
    t_out = np.empty(cap, np.int64)
    p_out = np.empty(cap, np.int8)
    levels = np.empty(n, np.float64)
    k = v_level0
    m = 0
    last_t = last_t0
    for i in range(n):
        xi = x[i]
        v = k * threshold
        delta = xi - v
        cnt = 0
        pol = 0
        if delta > threshold:
            cnt = int(math.floor(delta / threshold))
            # keep the post-step residual in [0, threshold) despite rounding
            while xi - (k + cnt) * threshold >= threshold:
                cnt += 1
            while cnt > 1 and xi - (k + cnt) * threshold < 0.0:
                cnt -= 1
            pol = 1
        elif delta < -threshold:
            cnt = int(math.floor(-delta / threshold))
            while xi - (k - cnt) * threshold <= -threshold:
                cnt += 1
            while cnt > 1 and xi - (k - cnt) * threshold > 0.0:
                cnt -= 1
            pol = -1
        if cnt > 0:
            if m + cnt > cap:
                while m + cnt > cap:
                    cap *= 2
                t_new = np.empty(cap, np.int64)
                p_new = np.empty(cap, np.int8)
                t_new[:m] = t_out[:m]
                p_new[:m] = p_out[:m]
                t_out = t_new
                p_out = p_new
            for j in range(cnt):
                # linspace(i, i + 1, cnt), endpoint included
                if cnt == 1:
                    pos = float(i0 + i)
                else:
                    pos = i0 + i + j / (cnt - 1.0)
                t = int(math.floor(pos * us_per_sample + 0.5))
                if t <= last_t:
                    t = last_t + 1
                t_out[m] = t
                p_out[m] = pol
                last_t = t
                m += 1
            k += pol * cnt
        levels[i] = k * threshold
    return t_out[:m], p_out[:m], levels, k, last_t


@dataclass
class DeltaModulator:
    """Streaming delta modulator; ``v_reset`` is the last reconstruction level.

    The level is kept as an integer number of steps so ``v_reset`` is always an
    exact multiple of ``threshold``.
    """

    threshold: float
    sample_rate_hz: float
    level: int = 0
    samples_seen: int = 0
    last_t_us: int = -1

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("delta threshold must be positive")

    @property
    def v_reset(self) -> float:
        return self.level * self.threshold

    def process(self, signal) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Consume samples; return ``(t_us, polarity, level_after_each_sample)``."""
        x = np.ascontiguousarray(signal, dtype=np.float64)
        us = 1e6 / self.sample_rate_hz
        t, p, levels, k, last = _delta_kernel(x, float(self.threshold), us, self.level,
                                              self.samples_seen, self.last_t_us)
        self.level = int(k)
        self.last_t_us = int(last)
        self.samples_seen += len(x)
        return t, p, levels


def delta_modulate(signal, threshold: float, sample_rate_hz: float) -> tuple[np.ndarray, np.ndarray]:
    """Delta-modulate one channel starting from ``v_reset = 0``.

    Returns ``(t_us, polarity)``: for a sample step of ``n`` thresholds, ``n``
    pulses are spread as ``linspace(i, i + 1, n)`` sample positions, rounded
    to microseconds, with same-microsecond collisions bumped forward.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty signal")
    t, p, _ = DeltaModulator(threshold, sample_rate_hz).process(x)
    return t, p


def delta_levels(signal, threshold: float) -> np.ndarray:
    """Reconstruction level ``v_reset`` after each sample."""
    if not threshold > 0:
        raise ValueError("delta threshold must be positive")
    x = np.ascontiguousarray(signal, dtype=np.float64)
    return _delta_kernel(x, float(threshold), 1.0, 0, 0, -1)[2]


def reconstruct(t_us, polarity, threshold: float, at_us=None) -> np.ndarray:
    """Stair-step reconstruction ``threshold * cumsum(polarity)``.

    Without ``at_us`` the level after each event is returned; otherwise the
    level at each query time, counting events with ``t <= at``.
    """
    t_us = np.asarray(t_us)
    steps = np.cumsum(np.asarray(polarity, dtype=np.int64))
    if at_us is None:
        return threshold * steps.astype(np.float64)
    n = np.searchsorted(t_us, np.asarray(at_us), side="right")
    lv = np.concatenate([[0], steps])[n]
    return threshold * lv.astype(np.float64)


# --------------------------------------------------------------------------
# thresholds


@dataclass
class ThresholdMode:
    kind: str  # "frac-peak" | "frac-p2p" | "fixed" | "rate"
    value: float

    @classmethod
    def parse(cls, text: str) -> "ThresholdMode":
        kind, _, val = text.partition(":")
        aliases = {"fraction-of-peak": "frac-peak", "fraction-of-p2p": "frac-p2p"}
        kind = aliases.get(kind, kind)
        if kind not in ("frac-peak", "frac-p2p", "fixed", "rate") or not val:
            raise ValueError(
                f"bad threshold mode {text!r}; use frac-peak:F, frac-p2p:F, fixed:V or rate:HZ")
        v = float(val)
        if not v > 0:
            raise ValueError("threshold mode value must be positive")
        return cls(kind, v)

    def __str__(self):
        return f"{self.kind}:{self.value:g}"


@dataclass
class ChannelThresholds:
    values: np.ndarray
    fallback: np.ndarray  # True where no spikes were found and the default was used

    def __len__(self):
        return len(self.values)


def _spike_windows(x, starts, w):
    starts = starts[(starts >= 0) & (starts + w <= len(x))]
    if len(starts) == 0:
        return np.empty((0, w))
    return x[starts[:, None] + np.arange(w)[None, :]]


def spike_waveforms(rec: Recording, channel: int, window_s: float = 1e-3) -> np.ndarray:
    """1 ms waveforms of one channel, cut at ground-truth onsets or, without
    ground truth, centred on absolute-threshold detections."""
    fs = rec.sample_rate_hz
    w = int(round(window_s * fs))
    x = rec.samples[channel]
    if rec.ground_truth is not None:
        starts = np.rint(rec.ground_truth[channel] * fs).astype(np.int64)
    else:
        from .baselines import abs_threshold_detect
        det = abs_threshold_detect(x, fs)
        starts = np.rint(det * fs / 1e6).astype(np.int64) - w // 2
    return _spike_windows(x, starts, w)


def event_count(signal, threshold: float) -> int:
    lv = delta_levels(signal, threshold)
    return int(np.abs(np.diff(np.round(lv / threshold), prepend=0.0)).sum())


def threshold_for_rate(signal, sample_rate_hz: float, rate_hz: float, iters: int = 40) -> float:
    """Delta threshold whose event rate on ``signal`` is closest to ``rate_hz``.

    Bisection in log space; the event count is non-increasing in the threshold
    up to rounding of individual samples.
    """
    x = np.ascontiguousarray(signal, dtype=np.float64)
    span = float(np.max(np.abs(x))) if x.size else 0.0
    if not span > 0:
        return DEFAULT_FALLBACK_THRESHOLD
    target = rate_hz * x.size / sample_rate_hz
    lo, hi = math.log(span * 1e-6), math.log(2.0 * span)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if event_count(x, math.exp(mid)) > target:
            lo = mid
        else:
            hi = mid
    return math.exp(hi)


def pick_threshold(rec: Recording, mode: ThresholdMode | str,
                   default: float = DEFAULT_FALLBACK_THRESHOLD) -> ChannelThresholds:
    """Per-channel delta thresholds.

    ``frac-peak:f`` uses f x mean spike peak |x|, ``frac-p2p:f`` uses f x mean
    peak-to-peak of 1 ms waveforms, ``fixed:v`` uses v everywhere and
    ``rate:r`` searches for r events per second on each channel. Channels
    without spikes fall back to ``default`` and are flagged.
    """
    if isinstance(mode, str):
        mode = ThresholdMode.parse(mode)
    vals = np.empty(rec.channels)
    flags = np.zeros(rec.channels, dtype=bool)
    for ch in range(rec.channels):
        if mode.kind == "fixed":
            vals[ch] = mode.value
            continue
        if mode.kind == "rate":
            vals[ch] = threshold_for_rate(rec.samples[ch], rec.sample_rate_hz, mode.value)
            continue
        wf = spike_waveforms(rec, ch)
        if len(wf) == 0:
            vals[ch] = default
            flags[ch] = True
            continue
        if mode.kind == "frac-peak":
            stat = np.mean(np.max(np.abs(wf), axis=1))
        else:
            stat = np.mean(np.ptp(wf, axis=1))
        if not stat > 0:
            vals[ch] = default
            flags[ch] = True
        else:
            vals[ch] = mode.value * stat
    if flags.any():
        log.warning("no spikes found on channels %s; using fixed threshold %g",
                    np.flatnonzero(flags).tolist(), default)
    return ChannelThresholds(vals, flags)


# --------------------------------------------------------------------------
# streams


@dataclass
class EventStream:
    t_us: np.ndarray
    address: np.ndarray
    polarity: np.ndarray

    def __post_init__(self):
        self.t_us = np.asarray(self.t_us, dtype=np.int64)
        self.address = np.asarray(self.address, dtype=np.int64)
        self.polarity = np.asarray(self.polarity, dtype=np.int8)

    def __len__(self):
        return len(self.t_us)

    def __iter__(self) -> Iterator[AerEvent]:
        for t, a, p in zip(self.t_us.tolist(), self.address.tolist(), self.polarity.tolist()):
            yield AerEvent(t, a, p)

    @property
    def n_channels(self) -> int:
        return int(self.address.max()) + 1 if len(self) else 0

    def split(self, n_channels: int | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-address ``(t_us, polarity)`` lists, original order preserved."""
        n = self.n_channels if n_channels is None else n_channels
        order = np.argsort(self.address, kind="stable")
        a = self.address[order]
        bounds = np.searchsorted(a, np.arange(n + 1))
        t, p = self.t_us[order], self.polarity[order]
        return [(t[bounds[c]:bounds[c + 1]], p[bounds[c]:bounds[c + 1]]) for c in range(n)]

    def channel(self, address: int) -> tuple[np.ndarray, np.ndarray]:
        m = self.address == address
        return self.t_us[m], self.polarity[m]


def merge_channels(pulses: Sequence[tuple[np.ndarray, np.ndarray]],
                   addresses: Sequence[int] | None = None) -> EventStream:
    """Merge per-channel pulse lists into one stream (time, then address)."""
    if addresses is None:
        addresses = range(len(pulses))
    addresses = list(addresses)
    if len(addresses) > MAX_CHANNELS or (addresses and max(addresses) >= MAX_CHANNELS):
        raise ValueError(f"at most {MAX_CHANNELS} channels can be addressed")
    if not pulses:
        return EventStream(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int8))
    t = np.concatenate([np.asarray(p[0], np.int64) for p in pulses])
    pol = np.concatenate([np.asarray(p[1], np.int8) for p in pulses])
    addr = np.concatenate([np.full(len(p[0]), a, np.int64) for p, a in zip(pulses, addresses)])
    order = np.lexsort((addr, t))
    return EventStream(t[order], addr[order], pol[order])


def encode_recording(rec: Recording, thresholds) -> EventStream:
    """Delta-modulate every channel and merge into a single AER stream."""
    if rec.channels > MAX_CHANNELS:
        raise ValueError(f"{rec.channels} channels exceed the {MAX_CHANNELS}-address space")
    th = thresholds.values if isinstance(thresholds, ChannelThresholds) else thresholds
    th = np.broadcast_to(np.asarray(th, dtype=float), (rec.channels,))
    pulses = [delta_modulate(rec.samples[ch], th[ch], rec.sample_rate_hz)
              for ch in range(rec.channels)]
    return merge_channels(pulses)


def write_aer(stream: EventStream, path) -> None:
    if len(stream) and (stream.t_us.min() < 0 or stream.t_us.max() >= 2**32):
        raise ValueError("timestamps do not fit in u32")
    rec = np.zeros(len(stream), dtype=AER_RECORD)
    rec["t_us"] = stream.t_us
    rec["address"] = stream.address
    rec["polarity"] = stream.polarity
    with open(path, "wb") as f:
        f.write(AER_MAGIC + struct.pack("<I", len(stream)))
        f.write(rec.tobytes())


def read_aer(path) -> EventStream:
    raw = Path(path).read_bytes()
    if raw[:4] != AER_MAGIC:
        raise ValueError(f"{path}: not an AER1 event file")
    (count,) = struct.unpack_from("<I", raw, 4)
    body = raw[8:]
    if len(body) != count * AER_RECORD.itemsize:
        raise ValueError(f"{path}: header says {count} records, file holds {len(body) // AER_RECORD.itemsize}")
    rec = np.frombuffer(body, dtype=AER_RECORD)
    return EventStream(rec["t_us"].astype(np.int64), rec["address"].astype(np.int64),
                       rec["polarity"].astype(np.int8))


def write_aer_csv(stream: EventStream, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t_us", "address", "polarity"])
        w.writerows(zip(stream.t_us.tolist(), stream.address.tolist(), stream.polarity.tolist()))


def read_aer_csv(path) -> EventStream:
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    if data.size == 0:
        return merge_channels([])
    return EventStream(data[:, 0], data[:, 1], data[:, 2])
