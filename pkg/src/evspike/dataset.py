"""Synthetic and raw multi-channel recordings.

Recordings are held channel-major as a ``(channels, samples)`` float array in
normalized amplitude units (spike templates peak at 1.0). Ground truth, when
present, is a list with one sorted array of onset times (seconds) per channel.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal as sps

DEFAULT_SAMPLE_RATE_HZ = 24_000.0
DEFAULT_BAND_HZ = (300.0, 3000.0)
TEMPLATE_SUPPORT_S = 1e-3

ENCODINGS = {"i16le": np.dtype("<i2"), "f32le": np.dtype("<f4")}
_ENCODING_ALIASES = {
    "int16": "i16le",
    "i16": "i16le",
    "float32": "f32le",
    "f32": "f32le",
}

SNR_CAP_DB = math.inf


@dataclass
class Recording:
    sample_rate_hz: float
    samples: np.ndarray
    ground_truth: list[np.ndarray] | None = None

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.ground_truth is not None:
            if len(self.ground_truth) != self.channels:
                raise ValueError("ground_truth needs one entry per channel")
            self.ground_truth = [np.asarray(g, dtype=np.float64) for g in self.ground_truth]

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    def truth_us(self, channel: int) -> np.ndarray:
        """Ground-truth onsets of one channel as integer microseconds."""
        if self.ground_truth is None:
            raise ValueError("recording has no ground truth")
        return np.rint(self.ground_truth[channel] * 1e6).astype(np.int64)


# --------------------------------------------------------------------------
# templates


def _gauss(t, mu, sd):
    return np.exp(-0.5 * ((t - mu) / sd) ** 2)


# (amplitude, centre_ms, width_ms) components; all fit inside 1 ms
# (amplitude, centre ms, width ms) per phase; small trailing lobes mimic the
# ringing left after band-pass filtering of recorded units
_TEMPLATE_SHAPES = {
    "pos_neg_pos": [(0.50, 0.14, 0.045), (-1.0, 0.32, 0.055), (0.85, 0.52, 0.060),
                    (-0.50, 0.74, 0.060), (0.20, 0.90, 0.050)],
    "neg_pos_slow": [(-1.0, 0.16, 0.050), (0.85, 0.38, 0.060), (-0.55, 0.62, 0.065),
                     (0.30, 0.85, 0.060)],
    "neg_pos_fast": [(-1.0, 0.20, 0.050), (0.95, 0.42, 0.055), (-0.45, 0.64, 0.060),
                     (0.30, 0.84, 0.060)],
    "pos_neg": [(1.0, 0.18, 0.050), (-0.90, 0.40, 0.060), (0.50, 0.64, 0.065),
                (-0.25, 0.86, 0.060)],
}


def builtin_templates(sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ) -> dict[str, np.ndarray]:
    """Four 1 ms spike waveforms sampled at ``sample_rate_hz``, peak |x| = 1."""
    n = int(round(TEMPLATE_SUPPORT_S * sample_rate_hz))
    t_ms = np.arange(n) * 1e3 / sample_rate_hz
    out = {}
    for name, parts in _TEMPLATE_SHAPES.items():
        w = sum(a * _gauss(t_ms, mu, sd) for a, mu, sd in parts)
        # pin both ends to zero so placement does not leave a step
        w = w - np.linspace(w[0], w[-1], n)
        out[name] = w / np.max(np.abs(w))
    return out


def _resample_template(w: np.ndarray, from_hz: float, to_hz: float) -> np.ndarray:
    if from_hz == to_hz:
        return w
    dur = len(w) / from_hz
    t_new = np.arange(int(round(dur * to_hz))) / to_hz
    out = np.interp(t_new, np.arange(len(w)) / from_hz, w)
    return out / np.max(np.abs(out))


# --------------------------------------------------------------------------
# synthesis


@dataclass
class SynthesisSpec:
    """Parameters of a synthetic recording.

    ``noise_sigma`` is the standard deviation of the additive Gaussian noise
    relative to the unit template peak. ``noise_band_hz`` optionally shapes that
    noise to a frequency band (still Gaussian, still of std ``noise_sigma``);
    ``None`` gives white noise. ``onsets_s``, when given, replaces the Poisson
    draw with fixed onset times applied to every channel.
    """

    templates: Sequence[np.ndarray] = field(default_factory=lambda: list(builtin_templates().values()))
    firing_rate_hz: float = 20.0
    noise_sigma: float = 0.05
    duration_s: float = 6.0
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ
    rng_seed: int = 0
    min_separation_s: float = 2e-3
    channels: int = 1
    template_rate_hz: float | None = None
    noise_band_hz: tuple[float, float] | None = None
    onsets_s: Sequence[float] | None = None
    channel_offset: int = 0

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if len(self.templates) == 0:
            raise ValueError("at least one template is required")
        if any(len(t) == 0 for t in self.templates):
            raise ValueError("empty template")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.firing_rate_hz < 0:
            raise ValueError("firing_rate_hz must be >= 0")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")


def channel_rng(seed: int, channel: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for one channel, stable under any blocking."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, channel)))


def poisson_onsets(rate_hz: float, duration_s: float, min_separation_s: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Poisson onset times thinned so consecutive onsets are >= min_separation_s apart."""
    if rate_hz <= 0:
        return np.empty(0)
    n_draw = int(rate_hz * duration_s + 10 * math.sqrt(rate_hz * duration_s) + 20)
    t = np.cumsum(rng.exponential(1.0 / rate_hz, n_draw))
    while t[-1] < duration_s:
        t = np.concatenate([t, t[-1] + np.cumsum(rng.exponential(1.0 / rate_hz, n_draw))])
    t = t[t < duration_s]
    keep = []
    last = -math.inf
    for x in t:
        if x - last >= min_separation_s:
            keep.append(x)
            last = x
    return np.asarray(keep)


def band_noise(n: int, sigma: float, band_hz: tuple[float, float] | None,
               sample_rate_hz: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise of standard deviation ``sigma``, white or band-shaped."""
    z = rng.standard_normal(n)
    if band_hz is not None and n > 0:
        sos = sps.butter(2, band_hz, btype="band", fs=sample_rate_hz, output="sos")
        z = sps.sosfilt(sos, z)
        sd = z.std()
        if sd > 0:
            z /= sd
    return sigma * z


def synthesize_channel(spec: SynthesisSpec, channel: int) -> tuple[np.ndarray, np.ndarray]:
    """One channel of ``spec``: (samples, onset times in s). Pure in ``(spec, channel)``."""
    fs = spec.sample_rate_hz
    n = int(round(spec.duration_s * fs))
    src_hz = spec.template_rate_hz or fs
    templates = [_resample_template(np.asarray(t, float), src_hz, fs) for t in spec.templates]
    rng = channel_rng(spec.rng_seed, spec.channel_offset + channel)
    if spec.onsets_s is not None:
        onsets = np.asarray(spec.onsets_s, dtype=float)
    else:
        onsets = poisson_onsets(spec.firing_rate_hz, spec.duration_s, spec.min_separation_s, rng)
    idx = np.rint(onsets * fs).astype(np.int64)
    idx = idx[(idx >= 0) & (idx < n)]
    which = rng.integers(0, len(templates), size=len(idx))
    x = np.zeros(n)
    for i, k in zip(idx, which):
        w = templates[k]
        m = min(len(w), n - i)
        x[i:i + m] += w[:m]
    if spec.noise_sigma > 0:
        x += band_noise(n, spec.noise_sigma, spec.noise_band_hz, fs, rng)
    return x, idx / fs


def synthesize(spec: SynthesisSpec) -> Recording:
    """Generate a recording with Poisson spike trains and additive Gaussian noise.

    Deterministic in ``spec.rng_seed``; each channel draws from its own
    sub-seed so any subset of channels can be regenerated independently.
    """
    rows, truth = [], []
    for ch in range(spec.channels):
        x, t = synthesize_channel(spec, ch)
        rows.append(x)
        truth.append(t)
    return Recording(spec.sample_rate_hz, np.vstack(rows), truth)


def sigma_for_snr(snr_db: float, peak: float = 1.0) -> float:
    """Noise std giving ``snr_db`` under the peak/RMS definition of :func:`snr_of`."""
    return peak * 10.0 ** (-snr_db / 20.0)


def snr_of(rec: Recording, window_s: float = TEMPLATE_SUPPORT_S, margin_s: float = 1e-3) -> float:
    """Mean spike peak over noise RMS, in dB.

    Peaks are the max |x| in ``[onset, onset + window_s)``; noise RMS uses the
    samples farther than ``margin_s`` from any spike window. Returns ``inf``
    when the noise RMS is zero.
    """
    if rec.ground_truth is None:
        raise ValueError("snr_of needs ground truth")
    fs = rec.sample_rate_hz
    w = int(round(window_s * fs))
    pad = int(round(margin_s * fs))
    peaks = []
    quiet = np.ones(rec.samples.shape, dtype=bool)
    for ch in range(rec.channels):
        x = rec.samples[ch]
        for i in np.rint(rec.ground_truth[ch] * fs).astype(np.int64):
            seg = x[i:i + w]
            if len(seg):
                peaks.append(np.max(np.abs(seg)))
            quiet[ch, max(0, i - pad):i + w + pad] = False
    if not peaks:
        raise ValueError("no spikes in ground truth")
    noise = rec.samples[quiet]
    rms = math.sqrt(float(np.mean(noise ** 2))) if noise.size else 0.0
    if rms == 0.0:
        return SNR_CAP_DB
    return 20.0 * math.log10(float(np.mean(peaks)) / rms)


# --------------------------------------------------------------------------
# filtering


def bandpass_sos(low_hz: float, high_hz: float, sample_rate_hz: float, order: int = 4):
    if not (0 < low_hz < high_hz < sample_rate_hz / 2):
        raise ValueError(
            f"invalid band edges {low_hz}-{high_hz} Hz for fs={sample_rate_hz} Hz")
    return sps.butter(order, [low_hz, high_hz], btype="band", fs=sample_rate_hz, output="sos")


def bandpass(rec: Recording, low_hz: float = DEFAULT_BAND_HZ[0],
             high_hz: float = DEFAULT_BAND_HZ[1], order: int = 4) -> Recording:
    """Zero-phase Butterworth band-pass (forward-backward SOS) removing the LFP."""
    sos = bandpass_sos(low_hz, high_hz, rec.sample_rate_hz, order)
    if rec.n_samples == 0:
        y = rec.samples.copy()
    else:
        padlen = min(3 * (2 * len(sos) + 1), rec.n_samples - 1)
        y = sps.sosfiltfilt(sos, rec.samples, axis=-1, padlen=padlen)
    return Recording(rec.sample_rate_hz, y, rec.ground_truth)


# --------------------------------------------------------------------------
# raw files


def _encoding(name: str) -> str:
    key = _ENCODING_ALIASES.get(name, name)
    if key not in ENCODINGS:
        raise ValueError(f"unknown sample encoding {name!r}; expected one of {sorted(ENCODINGS)}")
    return key


def load_raw(path, sample_rate_hz: float, channels: int, sample_encoding: str = "i16le",
             gain: float = 1.0) -> Recording:
    """Read a headerless file of interleaved samples into a channel-major Recording."""
    enc = _encoding(sample_encoding)
    dt = ENCODINGS[enc]
    raw = Path(path).read_bytes()
    frame = channels * dt.itemsize
    if len(raw) % frame:
        raise ValueError(
            f"truncated raw file: {len(raw)} bytes is not a multiple of {channels} x {dt.itemsize}")
    data = np.frombuffer(raw, dtype=dt).reshape(-1, channels).T
    return Recording(sample_rate_hz, data.astype(np.float64) * gain)


def save_raw(rec: Recording, path, sample_encoding: str = "f32le", gain: float = 1.0) -> None:
    enc = _encoding(sample_encoding)
    dt = ENCODINGS[enc]
    x = rec.samples.T / gain
    if dt.kind == "i":
        x = np.clip(np.rint(x), np.iinfo(dt).min, np.iinfo(dt).max)
    Path(path).write_bytes(np.ascontiguousarray(x.astype(dt)).tobytes())


def write_recording(rec: Recording, directory, sample_encoding: str = "f32le",
                    gain: float = 1.0) -> Path:
    """Write ``recording.bin`` + ``recording.json`` (+ ``ground_truth.csv``)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_raw(rec, d / "recording.bin", sample_encoding, gain)
    meta = {"sample_rate_hz": rec.sample_rate_hz, "channels": rec.channels,
            "encoding": _encoding(sample_encoding), "gain": gain}
    (d / "recording.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if rec.ground_truth is not None:
        write_ground_truth(rec.ground_truth, d / "ground_truth.csv")
    return d


def read_recording(directory) -> Recording:
    d = Path(directory)
    meta = json.loads((d / "recording.json").read_text())
    rec = load_raw(d / "recording.bin", meta["sample_rate_hz"], meta["channels"],
                   meta.get("encoding", "i16le"), meta.get("gain", 1.0))
    gt = d / "ground_truth.csv"
    if gt.exists():
        rec.ground_truth = read_ground_truth(gt, rec.channels)
    return rec


def write_ground_truth(truth: Sequence[np.ndarray], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["channel", "time_s"])
        for ch, ts in enumerate(truth):
            for t in ts:
                w.writerow([ch, repr(float(t))])


def read_ground_truth(path, channels: int) -> list[np.ndarray]:
    out: list[list[float]] = [[] for _ in range(channels)]
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[int(row["channel"])].append(float(row["time_s"]))
    return [np.sort(np.asarray(v)) for v in out]
