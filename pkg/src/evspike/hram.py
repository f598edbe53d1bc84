"""Behavioral model of the hybrid eDRAM/SRAM in-memory spike detector.

Each channel owns ``n_s`` bitcells used as a circular buffer. During one
detection period the selected bitcell is reset, integrates one voltage jump
per incoming event, and latches ``v_cap > trip_point``; a ripple counter
then reports how many of the stored bits are set. Voltages are normalized so
that one nominal event jump equals 1.0, which makes ``trip_point`` an event
count.

Two implementations are provided: :class:`ChannelHram` steps one period at
a time and mirrors the hardware phases, while :func:`run_macro` processes
whole channels with numpy. Both consume random numbers in the same order, so
they agree exactly for a given seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import channel_rng
from .encoder import BANK_BITS, CHANNEL_BITS, MAX_CHANNELS, EventStream
from .evspd import EvSpdParams, detections_from_sums, n_bins_for

# independent random streams per channel
MISMATCH_STREAM = 101
FLIP_STREAM = 102
CALIB_STREAM = 103

DEFAULT_DEAD_FRACTION = 0.0064
CALIB_PERIOD_US = 10_000
CALIB_PRESENTATIONS = 100
CALIB_TIE_ORDER = (1, 2, 0, 3)


@dataclass(frozen=True)
class MismatchSpec:
    """Device variation and latch errors.

    ``jump_cv`` and ``trip_cv`` are coefficients of variation of the
    per-bitcell jump gain and inverter trip point; ``jump_shared`` is the
    share of the jump variance common to all bitcells of a channel (bias
    current variation), the rest being independent per bitcell.
    ``flip_prob_pos`` is the
    chance that a bit which should be 1 is stored as 0; ``flip_prob_neg`` the
    reverse.
    """

    jump_cv: float = 0.0
    trip_cv: float = 0.0
    flip_prob_pos: float = 0.017
    flip_prob_neg: float = 0.03
    rng_seed: int = 0
    jump_shared: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.jump_shared <= 1.0:
            raise ValueError("jump_shared must lie in [0, 1]")
        if self.jump_cv < 0 or self.trip_cv < 0:
            raise ValueError("coefficients of variation must be >= 0")
        for p in (self.flip_prob_pos, self.flip_prob_neg):
            if not 0.0 <= p <= 1.0:
                raise ValueError("flip probabilities must lie in [0, 1]")

    @classmethod
    def ideal(cls, rng_seed: int = 0) -> "MismatchSpec":
        return cls(0.0, 0.0, 0.0, 0.0, rng_seed)

    @property
    def has_flips(self) -> bool:
        return self.flip_prob_pos > 0 or self.flip_prob_neg > 0

    def replace(self, **kw) -> "MismatchSpec":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return MismatchSpec(**d)


@dataclass(frozen=True)
class VbpTable:
    """Jump-gain multiplier selected by the 2-bit bias code.

    Lower codes mean a lower bias voltage, hence a larger jump per event.
    """

    multipliers: tuple[float, ...] = (1.25, 1.0, 0.85, 0.7)
    default_code: int = 1

    def __post_init__(self):
        m = tuple(float(x) for x in self.multipliers)
        object.__setattr__(self, "multipliers", m)
        if len(m) != 4:
            raise ValueError("VbpTable needs exactly four multipliers")
        if any(x <= 0 for x in m) or any(a <= b for a, b in zip(m, m[1:])):
            raise ValueError("multipliers must be positive and strictly decreasing")
        if not 0 <= self.default_code < 4:
            raise ValueError("default_code must be in [0, 3]")

    def __getitem__(self, code: int) -> float:
        if not 0 <= code < 4:
            raise ValueError(f"vbp code {code} out of range")
        return self.multipliers[code]


@dataclass(frozen=True)
class HramParams:
    """Timing and thresholds of the macro.

    ``trip_point`` defaults to ``thr1 + 0.5`` so the nominal latch threshold
    sits halfway between integer event counts; for integer counts this is
    the same decision as ``count > thr1``. ``dead_fraction`` of every period
    (at its start) does not accumulate. ``leak_tau_us`` enables exponential
    decay of the capacitor voltage.
    """

    t_s_us: int = 125
    n_s: int = 8
    trip_point: float = 3.5
    thr2: int = 3
    refractory_us: int = 1000
    dead_fraction: float = DEFAULT_DEAD_FRACTION
    leak_tau_us: float | None = None

    def __post_init__(self):
        if self.t_s_us <= 0 or self.n_s < 1:
            raise ValueError("t_s_us and n_s must be positive")
        if not self.trip_point > 0:
            raise ValueError("trip_point must be positive")
        if not 1 <= self.thr2 <= self.n_s:
            raise ValueError(f"thr2 must lie in [1, {self.n_s}]")
        if not 0.0 <= self.dead_fraction < 1.0:
            raise ValueError("dead_fraction must lie in [0, 1)")
        if self.leak_tau_us is not None and not self.leak_tau_us > 0:
            raise ValueError("leak_tau_us must be positive")

    @classmethod
    def from_evspd(cls, p: EvSpdParams, **kw) -> "HramParams":
        kw.setdefault("trip_point", p.thr1 + 0.5)
        return cls(t_s_us=p.t_s_us, n_s=p.n_s, thr2=p.thr2, refractory_us=p.refractory_us, **kw)

    @classmethod
    def ideal(cls, p: EvSpdParams = EvSpdParams()) -> "HramParams":
        """Settings under which the macro reproduces ``evspd.detect`` exactly."""
        return cls.from_evspd(p, dead_fraction=0.0, leak_tau_us=None)

    def replace(self, **kw) -> "HramParams":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return HramParams(**d)

    def evspd(self) -> EvSpdParams:
        return EvSpdParams(t_s_us=self.t_s_us, n_s=self.n_s, thr1=self.trip_point,
                           thr2=self.thr2, refractory_us=self.refractory_us)

    @property
    def dead_us(self) -> float:
        return self.dead_fraction * self.t_s_us


def draw_mismatch(mismatch: MismatchSpec, channel: int, params: HramParams):
    """Per-bitcell ``(jump_gain, trip_point)`` arrays for one channel."""
    rng = channel_rng(mismatch.rng_seed, channel, MISMATCH_STREAM)
    z = rng.standard_normal((2, params.n_s))
    shared = rng.standard_normal()
    f = mismatch.jump_shared
    dev = np.sqrt(f) * shared + np.sqrt(1.0 - f) * z[0]
    gain = np.maximum(1.0 + mismatch.jump_cv * dev, 0.05)
    trip = np.maximum(params.trip_point * (1.0 + mismatch.trip_cv * z[1]), 1e-3)
    return gain, trip


# --------------------------------------------------------------------------
# stepwise model


@dataclass
class BitcellModel:
    jump_gain: float = 1.0
    trip_point: float = 3.5
    v_cap: float = 0.0
    stored_bit: int = 0

    def reset(self) -> None:
        self.v_cap = 0.0

    def accumulate(self, jump: float) -> None:
        self.v_cap += jump

    def latch(self, u: float | None, mismatch: MismatchSpec) -> int:
        """Store the thresholded voltage; ``u`` is a uniform draw for flips."""
        ideal = self.v_cap > self.trip_point
        bit = int(ideal)
        if u is not None:
            if ideal and u < mismatch.flip_prob_pos:
                bit = 0
            elif not ideal and u < mismatch.flip_prob_neg:
                bit = 1
        self.stored_bit = bit
        return bit


@dataclass
class ChannelHram:
    bitcells: list[BitcellModel]
    pointer: int = 0
    vbp_code: int = 1
    counter: int = 0
    period: int = 0
    flip_rng: np.random.Generator | None = field(default=None, repr=False)

    @classmethod
    def build(cls, channel: int, params: HramParams = HramParams(),
              mismatch: MismatchSpec = MismatchSpec.ideal(), vbp_code: int = 1,
              flip_stream: int = FLIP_STREAM) -> "ChannelHram":
        gain, trip = draw_mismatch(mismatch, channel, params)
        cells = [BitcellModel(float(g), float(t)) for g, t in zip(gain, trip)]
        rng = channel_rng(mismatch.rng_seed, channel, flip_stream) if mismatch.has_flips else None
        return cls(cells, vbp_code=vbp_code, flip_rng=rng)

    @property
    def stored_bits(self) -> list[int]:
        return [c.stored_bit for c in self.bitcells]


def step_cycle(ch: ChannelHram, event_times_us, params: HramParams,
               mismatch: MismatchSpec, vbp: VbpTable = VbpTable()) -> int:
    """Run one detection period (reset, accumulate, threshold, readout).

    ``event_times_us`` must fall inside the current period. Returns the
    counter value read at the end of the period.
    """
    start = ch.period * params.t_s_us
    end = start + params.t_s_us
    times = np.asarray(event_times_us, dtype=np.int64)
    if times.size and (times.min() < start or times.max() >= end):
        raise ValueError(f"events outside period [{start}, {end})")
    cell = ch.bitcells[ch.pointer]
    cell.reset()
    jump = cell.jump_gain * vbp[ch.vbp_code]
    for t in times.tolist():
        if t - start < params.dead_us:
            continue
        if params.leak_tau_us is None:
            cell.accumulate(jump)
        else:
            cell.accumulate(jump * float(np.exp(-(end - t) / params.leak_tau_us)))
    u = float(ch.flip_rng.random()) if ch.flip_rng is not None else None
    cell.latch(u, mismatch)
    ch.counter = sum(c.stored_bit for c in ch.bitcells)
    ch.pointer = (ch.pointer + 1) % params.n_s
    ch.period += 1
    return ch.counter


# --------------------------------------------------------------------------
# vectorized macro


@dataclass
class MacroResult:
    channels: list[int]
    counters: list[np.ndarray]
    detections: list[np.ndarray]

    def by_channel(self) -> dict[int, np.ndarray]:
        return dict(zip(self.channels, self.detections))


def drop_dead(t_us, params: HramParams) -> np.ndarray:
    """Event times that survive the non-accumulating start of each period."""
    t = np.asarray(t_us, dtype=np.int64)
    if params.dead_fraction <= 0:
        return t
    return t[(t % params.t_s_us) >= params.dead_us]


def channel_bits(t_us, params: HramParams, n_bins: int, gain, trip, multiplier: float,
                 flip_rng: np.random.Generator | None, mismatch: MismatchSpec) -> np.ndarray:
    """Stored bit of every period for one channel."""
    t = np.asarray(t_us, dtype=np.int64)
    b = t // params.t_s_us
    keep = b < n_bins
    if params.dead_fraction > 0:
        keep &= (t - b * params.t_s_us) >= params.dead_us
    t, b = t[keep], b[keep]
    slot = b % params.n_s
    w = gain[slot] * multiplier
    if params.leak_tau_us is not None:
        w = w * np.exp(-((b + 1) * params.t_s_us - t) / params.leak_tau_us)
    v = np.bincount(b, weights=w, minlength=n_bins)
    ideal = v > np.resize(trip, n_bins)
    if flip_rng is None:
        return ideal.astype(np.int8)
    u = flip_rng.random(n_bins)
    return np.where(ideal, u >= mismatch.flip_prob_pos, u < mismatch.flip_prob_neg).astype(np.int8)


def counter_trace(bits, n_s: int) -> np.ndarray:
    """Popcount of the circular buffer read at the end of each period."""
    c = np.cumsum(np.asarray(bits, dtype=np.int64))
    s = c.copy()
    s[n_s:] -= c[:-n_s]
    return s


def run_channel(t_us, channel: int, params: HramParams = HramParams(),
                mismatch: MismatchSpec = MismatchSpec.ideal(), vbp_code: int | None = None,
                vbp: VbpTable = VbpTable(), n_bins: int | None = None,
                flip_stream: int = FLIP_STREAM) -> tuple[np.ndarray, np.ndarray]:
    """``(counter trace, detections in us)`` for one channel's event times."""
    t = np.asarray(t_us, dtype=np.int64)
    nb = n_bins_for(t, params.evspd(), n_bins)
    code = vbp.default_code if vbp_code is None else vbp_code
    gain, trip = draw_mismatch(mismatch, channel, params)
    rng = channel_rng(mismatch.rng_seed, channel, flip_stream) if mismatch.has_flips else None
    bits = channel_bits(t, params, nb, gain, trip, vbp[code], rng, mismatch)
    s = counter_trace(bits, params.n_s)
    return s, detections_from_sums(s, params.evspd())


def _route(stream: EventStream) -> dict[int, np.ndarray]:
    addr = stream.address
    if len(addr) and (addr.min() < 0 or addr.max() >= MAX_CHANNELS):
        raise ValueError(f"address out of range [0, {MAX_CHANNELS})")
    # bank = top bits, channel-in-bank = low bits; order channels bank-major
    bank = addr >> CHANNEL_BITS
    assert (bank < (1 << BANK_BITS)).all()
    order = np.argsort(addr, kind="stable")
    a = addr[order]
    t = stream.t_us[order]
    uniq, start = np.unique(a, return_index=True)
    ends = list(start[1:]) + [len(a)]
    return {int(u): t[s:e] for u, s, e in zip(uniq, start, ends)}


def run_macro(stream: EventStream | Sequence, params: HramParams = HramParams(),
              mismatch: MismatchSpec = MismatchSpec.ideal(), vbp_codes=None,
              vbp: VbpTable = VbpTable(), n_bins: int | None = None,
              channels: Sequence[int] | None = None) -> MacroResult:
    """Run the macro over an AER stream or a list of per-channel event times.

    ``vbp_codes`` may be ``None`` (default code), a single code, or one code
    per listed channel. ``n_bins`` fixes the number of periods simulated;
    when omitted each channel runs until its window empties after the last
    event, as the reference detector does.
    """
    if isinstance(stream, EventStream):
        per = _route(stream)
    else:
        per = {i: np.asarray(ev[0] if isinstance(ev, tuple) else ev, dtype=np.int64)
               for i, ev in enumerate(stream)}
        if len(per) > MAX_CHANNELS:
            raise ValueError(f"at most {MAX_CHANNELS} channels")
    chans = sorted(per) if channels is None else list(channels)
    for c in chans:
        if not 0 <= c < MAX_CHANNELS:
            raise ValueError(f"address {c} out of range [0, {MAX_CHANNELS})")
    if vbp_codes is None or np.ndim(vbp_codes) == 0:
        codes = [vbp.default_code if vbp_codes is None else int(vbp_codes)] * len(chans)
    else:
        codes = [int(c) for c in vbp_codes]
        if len(codes) != len(chans):
            raise ValueError("one vbp code per channel expected")
    counters, dets = [], []
    empty = np.empty(0, np.int64)
    for c, code in zip(chans, codes):
        s, d = run_channel(per.get(c, empty), c, params, mismatch, code, vbp, n_bins)
        counters.append(s)
        dets.append(d)
    return MacroResult(chans, counters, dets)


# --------------------------------------------------------------------------
# calibration


def build_stimuli(template, noise_segment, threshold: float, sample_rate_hz: float,
                  period_us: int = CALIB_PERIOD_US, offset_us: int = 1000):
    """Spike and noise stimuli as event-time arrays within one period.

    The template is placed ``offset_us`` into an otherwise silent period.
    The noise segment is truncated to one period and shifted to start at
    zero so the modulator does not emit a spurious start-up burst.
    """
    from .encoder import delta_modulate

    w = np.asarray(template, dtype=float)
    nz = np.asarray(noise_segment, dtype=float)
    if w.size == 0 or nz.size == 0:
        raise ValueError("stimuli need a non-empty template and noise segment")
    n = int(round(period_us * 1e-6 * sample_rate_hz))
    off = int(round(offset_us * 1e-6 * sample_rate_hz))
    if off + w.size > n:
        raise ValueError("template does not fit in one stimulus period")
    x = np.zeros(n)
    x[off:off + w.size] = w
    spike_t, _ = delta_modulate(x, threshold, sample_rate_hz)
    seg = nz[:n] - nz[0]
    noise_t, _ = delta_modulate(seg, threshold, sample_rate_hz)
    return spike_t[spike_t < period_us], noise_t[noise_t < period_us]


def _tile(stim, n: int, period_us: int) -> np.ndarray:
    stim = np.asarray(stim, dtype=np.int64)
    return (stim[None, :] + period_us * np.arange(n, dtype=np.int64)[:, None]).ravel()


@dataclass
class CalibrationResult:
    channels: list[int]
    codes: np.ndarray  # chosen code per channel
    fn: np.ndarray  # (channels, 4) spike presentations missed
    fp: np.ndarray  # (channels, 4) detections on the noise stimulus

    @property
    def cost(self) -> np.ndarray:
        return self.fn + self.fp

    def rows(self):
        for i, c in enumerate(self.channels):
            k = int(self.codes[i])
            yield c, k, int(self.fn[i, k]), int(self.fp[i, k])


def choose_code(cost, tie_order: Sequence[int] = CALIB_TIE_ORDER) -> int:
    """Minimum-cost code; ties go to the earliest entry of ``tie_order``."""
    cost = np.asarray(cost)
    best = cost.min()
    for k in tie_order:
        if cost[k] == best:
            return int(k)
    raise ValueError("tie_order must list every code")


def calibrate(spike_stimulus, noise_stimulus, channels: Sequence[int],
              params: HramParams = HramParams(), mismatch: MismatchSpec = MismatchSpec.ideal(),
              vbp: VbpTable = VbpTable(), presentations: int = CALIB_PRESENTATIONS,
              period_us: int = CALIB_PERIOD_US,
              tie_order: Sequence[int] = CALIB_TIE_ORDER) -> CalibrationResult:
    """Pick a bias code per channel minimizing missed spikes plus noise detections."""
    if spike_stimulus is None or noise_stimulus is None:
        raise ValueError("both spike and noise stimuli are required")
    spike = np.asarray(spike_stimulus, dtype=np.int64)
    noise = np.asarray(noise_stimulus, dtype=np.int64)
    if spike.size == 0:
        raise ValueError("spike stimulus has no events")
    if (spike.size and spike.max() >= period_us) or (noise.size and noise.max() >= period_us):
        raise ValueError("stimulus events must fall within one period")
    chans = list(channels)
    n_bins = presentations * period_us // params.t_s_us
    s_train = _tile(spike, presentations, period_us)
    n_train = _tile(noise, presentations, period_us)
    fn = np.zeros((len(chans), 4), np.int64)
    fp = np.zeros((len(chans), 4), np.int64)
    for i, c in enumerate(chans):
        for k in range(4):
            _, d = run_channel(s_train, c, params, mismatch, k, vbp, n_bins,
                               flip_stream=CALIB_STREAM + 2 * k)
            hit = np.unique(d // period_us)
            fn[i, k] = presentations - np.count_nonzero(hit < presentations)
            _, d = run_channel(n_train, c, params, mismatch, k, vbp, n_bins,
                               flip_stream=CALIB_STREAM + 2 * k + 1)
            fp[i, k] = len(d)
    codes = np.array([choose_code(fn[i] + fp[i], tie_order) for i in range(len(chans))],
                     dtype=np.int64)
    return CalibrationResult(chans, codes, fn, fp)


def onset_gain(t_us, params: HramParams = HramParams(), n_bins: int | None = None) -> float:
    """Smallest jump multiplier at which an ideal channel detects the stream.

    Detection happens for any multiplier strictly above the returned value;
    ``inf`` means the stream never triggers.
    """
    t = drop_dead(t_us, params)
    p = params.evspd()
    nb = n_bins_for(t, p, n_bins)
    counts = np.bincount(t // params.t_s_us, minlength=nb)[:nb] if len(t) else np.zeros(nb, int)
    for c in sorted(set(counts[counts > 0].tolist()), reverse=True):
        s = counter_trace(counts >= c, params.n_s)
        if len(detections_from_sums(s, p)):
            return params.trip_point / c
    return float("inf")
