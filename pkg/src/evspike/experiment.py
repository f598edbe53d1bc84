"""End-to-end benchmark: regenerate data, run every detector, write reports.

All work is done one channel at a time so memory stays flat regardless of
suite size; per-channel results are small count tuples that are reduced in
channel order, which keeps reports identical for any thread count.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import properties
from .baselines import BaselineParams, abs_threshold_detect, neo_detect
from .dataset import Recording, SynthesisSpec, bandpass, sigma_for_snr, synthesize_channel
from .encoder import delta_modulate, pick_threshold
from .evaluation import accuracy_array, firing_pattern, match_counts
from .evspd import EvSpdParams, bin_events, detect, detections_from_sums, moving_sum
from .hram import (HramParams, MismatchSpec, VbpTable, build_stimuli, calibrate, onset_gain,
                   run_channel)

log = logging.getLogger(__name__)

# --------------------------------------------------------------------------
# configuration

DEFAULT_CONFIG: dict = {
    "seed": 7,
    "threads": 1,
    "dataset": {
        "noise_levels": [0.05, 0.10, 0.15, 0.20],
        "duration_s": 60.0,
        "channels": 64,
        "sample_rate_hz": 24000.0,
        "firing_rate_hz": 60.0,
        "min_separation_s": 0.002,
        "band_hz": [300.0, 3000.0],
    },
    "encoder": {"mode": "frac-peak:0.1"},
    "evspd": {"t_s_us": 125, "n_s": 8, "thr1": 3.0, "thr2": 3, "refractory_us": 1000},
    "sweep": {"thr1": [1, 2, 3, 4, 5, 6], "thr2": [1, 2, 3, 4, 5, 6, 7]},
    "sensitivity": {"t_s_scale": [0.8, 1.2], "delta_scale": [0.8, 1.2]},
    "baselines": {"neo_thresh_mult": 6.0, "abs_mult": 4.0, "refractory_us": 1000},
    "matching": {"tolerance_us": 1000, "pattern_bin_us": 4000},
    "hram": {"trip_offset": 0.5, "dead_fraction": 0.0064, "leak_tau_us": None,
             "random_streams": 1000, "random_stream_seed_offset": 0},
    "mismatch": {"jump_cv": 0.1, "trip_cv": 0.05, "jump_shared": 0.5,
                 "flip_prob_pos": 0.017, "flip_prob_neg": 0.03},
    "flips": {"seeds": 10, "noise_levels": [0.15, 0.20]},
    "calibration": {"channels": 256, "noise_sigma": 0.20, "duration_s": 60.0,
                    "presentations": 100, "period_us": 10000,
                    "vbp": [1.25, 1.0, 0.85, 0.7], "default_code": 1,
                    "stimulus_margin": 1.15},
    "snr_sweep": {"snr_db": [4.0 + 72.0 * i / 19 for i in range(20)], "duration_s": 6.0,
                  "channels": 4, "firing_rate_hz": 20.0},
    "agreement": {"min_similarity": 0.85, "max_mae": 0.1},
    "checks": {"properties": True, "determinism": True},
}

CONFIG_DOCS: dict = {
    "seed": "root seed; every stage derives its own seed from it",
    "threads": "worker threads for per-channel work (results do not depend on it)",
    "dataset.noise_levels": "noise std per tier, relative to unit spike peak",
    "dataset.duration_s": "seconds per channel",
    "dataset.channels": "channels per tier",
    "dataset.sample_rate_hz": "sampling rate of the regenerated recordings",
    "dataset.firing_rate_hz": "Poisson spike rate per channel",
    "dataset.min_separation_s": "minimum gap between ground-truth spikes",
    "dataset.band_hz": "band-pass edges applied before encoding",
    "encoder.mode": "delta threshold rule: frac-peak:F, frac-p2p:F, fixed:V or rate:HZ",
    "evspd": "detector defaults (bin us, bins per window, thr1, thr2, refractory us)",
    "sweep": "thr1 and thr2 grids for the robustness sweep",
    "sensitivity.t_s_scale": "bin-length multipliers for the window-length study",
    "sensitivity.delta_scale": "delta-threshold multipliers for the modulation study",
    "baselines": "NEO multiplier on mean energy, absolute-threshold multiplier, refractory us",
    "matching": "truth matching tolerance and firing-pattern bin width (us)",
    "hram.trip_offset": "latch trip point = thr1 + trip_offset (event counts)",
    "hram.dead_fraction": "fraction of each period that drops events",
    "hram.leak_tau_us": "capacitor leakage time constant, null disables",
    "hram.random_streams": "randomized short streams for the macro/reference comparison",
    "hram.random_stream_seed_offset": "offset added to the seed of those streams",
    "mismatch": "device variation and latch flip probabilities for macro studies",
    "flips.seeds": "independent flip draws averaged per tier",
    "flips.noise_levels": "tiers used for the flip study",
    "calibration.channels": "simulated channels in the calibration population",
    "calibration.noise_sigma": "noise level of the calibration population",
    "calibration.duration_s": "seconds per calibration channel",
    "calibration.presentations": "stimulus repetitions per code",
    "calibration.period_us": "stimulus repetition period",
    "calibration.vbp": "jump multipliers for codes 0..3",
    "calibration.default_code": "code used before calibration",
    "calibration.stimulus_margin": "stimuli are picked to flip detection at this gain ratio",
    "snr_sweep": "SNR points (dB), seconds, channels and rate for the SNR study",
    "agreement": "bounds for event detector vs absolute threshold agreement",
    "checks.properties": "run the randomized property checks",
    "checks.determinism": "rerun a reduced config twice and compare output bytes",
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k == "doc":
            continue
        if k not in base:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ValueError(f"config key {key!r} must be an object")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def load_config(source=None, **overrides) -> dict:
    """Defaults, updated by a JSON file or dict, then by keyword overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if source is not None:
        if isinstance(source, dict):
            user = source
        else:
            try:
                user = json.loads(Path(source).read_text())
            except json.JSONDecodeError as e:
                raise ValueError(f"malformed config: {e}") from None
        if not isinstance(user, dict):
            raise ValueError("config must be a JSON object")
        cfg = _merge(cfg, user)
    for k, v in overrides.items():
        if v is not None:
            cfg = _merge(cfg, {k: v})
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    d = cfg["dataset"]
    if not d["noise_levels"]:
        raise ValueError("dataset.noise_levels is empty")
    if int(d["channels"]) < 1:
        raise ValueError("empty channel set")
    if d["duration_s"] <= 0:
        raise ValueError("dataset.duration_s must be positive")
    if int(cfg["threads"]) < 1:
        raise ValueError("threads must be >= 1")
    if int(cfg["calibration"]["channels"]) < 1:
        raise ValueError("calibration.channels must be >= 1")
    EvSpdParams(**cfg["evspd"])


def config_with_docs(cfg: dict | None = None) -> str:
    d = copy.deepcopy(cfg or DEFAULT_CONFIG)
    d["doc"] = CONFIG_DOCS
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def derive_seed(root: int, *keys: int) -> int:
    """Stable 32-bit seed for a stage identified by integer ``keys``."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1)[0])


# stage identifiers for derive_seed
_SUITE, _MISMATCH, _FLIPS, _CALIB, _SNR, _STREAMS, _CALMM = range(1, 8)


# --------------------------------------------------------------------------
# per-channel work


def _counts(truth, det, tol):
    return match_counts(truth, det, tol)


def _channel_signal(cfg: dict, sigma: float, seed: int, ch: int, duration_s: float,
                    firing_rate_hz: float | None = None) -> Recording:
    d = cfg["dataset"]
    spec = SynthesisSpec(noise_sigma=sigma, duration_s=duration_s,
                         sample_rate_hz=d["sample_rate_hz"], rng_seed=seed,
                         firing_rate_hz=d["firing_rate_hz"] if firing_rate_hz is None
                         else firing_rate_hz,
                         min_separation_s=d["min_separation_s"], channels=1,
                         channel_offset=ch)
    x, onsets = synthesize_channel(spec, 0)
    rec = Recording(spec.sample_rate_hz, x[None, :], [onsets])
    return bandpass(rec, *d["band_hz"])


def _evspd_params(cfg: dict) -> EvSpdParams:
    return EvSpdParams(**cfg["evspd"])


def _hram_params(cfg: dict, p: EvSpdParams, ideal: bool = False) -> HramParams:
    h = cfg["hram"]
    base = HramParams.from_evspd(p, trip_point=p.thr1 + h["trip_offset"])
    if ideal:
        return base.replace(dead_fraction=0.0, leak_tau_us=None)
    return base.replace(dead_fraction=h["dead_fraction"], leak_tau_us=h["leak_tau_us"])


def _mismatch(cfg: dict, seed: int, devices: bool = True, flips: bool = True) -> MismatchSpec:
    m = cfg["mismatch"]
    return MismatchSpec(jump_cv=m["jump_cv"] if devices else 0.0,
                        trip_cv=m["trip_cv"] if devices else 0.0,
                        flip_prob_pos=m["flip_prob_pos"] if flips else 0.0,
                        flip_prob_neg=m["flip_prob_neg"] if flips else 0.0,
                        jump_shared=m["jump_shared"], rng_seed=seed)


def suite_channel_data(cfg: dict, tier: int, ch: int):
    """``(filtered samples, truth us, delta threshold, event times)`` of one suite channel."""
    d = cfg["dataset"]
    sigma = float(d["noise_levels"][tier])
    rec = _channel_signal(cfg, sigma, derive_seed(cfg["seed"], _SUITE, tier), ch, d["duration_s"])
    x = rec.samples[0]
    delta = float(pick_threshold(rec, cfg["encoder"]["mode"]).values[0])
    ev, _ = delta_modulate(x, delta, float(d["sample_rate_hz"]))
    return x, rec.truth_us(0), delta, ev


def _suite_channel(cfg: dict, tier: int, ch: int) -> dict:
    d = cfg["dataset"]
    sigma = float(d["noise_levels"][tier])
    p = _evspd_params(cfg)
    tol = int(cfg["matching"]["tolerance_us"])
    fs = float(d["sample_rate_hz"])
    x, truth, delta, ev = suite_channel_data(cfg, tier, ch)
    n_bins = int(math.ceil(d["duration_s"] * 1e6 / p.t_s_us))
    out: dict = {"tier": tier, "channel": ch, "truth": len(truth), "events": len(ev),
                 "delta": delta}

    det = detect(ev, p)
    out["evspd"] = _counts(truth, det, tol)

    # threshold grid
    th1, th2 = cfg["sweep"]["thr1"], cfg["sweep"]["thr2"]
    counts = bin_events(ev, p.t_s_us, int(ev[-1] // p.t_s_us) + p.n_s if len(ev) else 0)
    grid = np.zeros((len(th1), len(th2), 3), np.int64)
    for i, t1 in enumerate(th1):
        s = moving_sum(counts > t1, p.n_s)
        for j, t2 in enumerate(th2):
            d_ij = detections_from_sums(s, p.replace(thr1=float(t1), thr2=int(t2)))
            grid[i, j] = _counts(truth, d_ij, tol)
    out["grid"] = grid

    out["t_s"] = [_counts(truth, detect(ev, p.replace(t_s_us=int(round(p.t_s_us * f)))), tol)
                  for f in cfg["sensitivity"]["t_s_scale"]]
    out["delta_scaled"] = [_counts(truth, detect(delta_modulate(x, delta * f, fs)[0], p), tol)
                           for f in cfg["sensitivity"]["delta_scale"]]

    b = cfg["baselines"]
    bp = BaselineParams(neo_thresh_mult=b["neo_thresh_mult"], abs_mult=b["abs_mult"],
                        refractory_us=b["refractory_us"])
    out["neo"] = _counts(truth, neo_detect(x, fs, bp), tol)
    abs_det = abs_threshold_detect(x, fs, bp.abs_mult, bp.refractory_us)
    out["abs"] = _counts(truth, abs_det, tol)
    # agreement: absolute threshold as reference
    out["agree"] = _counts(abs_det, det, tol)
    dur_us = int(round(d["duration_s"] * 1e6))
    pb = int(cfg["matching"]["pattern_bin_us"])
    fa = firing_pattern([det], pb, dur_us).counts
    fb = firing_pattern([abs_det], pb, dur_us).counts
    out["pattern_abs_diff"] = int(np.abs(fa - fb).sum())
    out["pattern_bins"] = int(fa.size)

    # hardware model: ideal equivalence, default non-idealities, flip study
    ideal = _hram_params(cfg, p, ideal=True)
    _, hdet = run_channel(ev, ch, ideal, MismatchSpec.ideal())
    out["hram_equal"] = bool(np.array_equal(hdet, det))
    mm_seed = derive_seed(cfg["seed"], _MISMATCH, tier)
    _, hdet = run_channel(ev, ch, _hram_params(cfg, p), _mismatch(cfg, mm_seed), n_bins=n_bins)
    out["hram"] = _counts(truth, hdet, tol)
    flips = []
    if sigma in [float(s) for s in cfg["flips"]["noise_levels"]]:
        for k in range(int(cfg["flips"]["seeds"])):
            mm = _mismatch(cfg, derive_seed(cfg["seed"], _FLIPS, tier, k), devices=False)
            _, fdet = run_channel(ev, ch, ideal, mm, n_bins=n_bins)
            flips.append(_counts(truth, fdet, tol))
    out["flips"] = flips
    return out


def _acc(c) -> float:
    return float(accuracy_array(*c))


def _mean_acc(rows) -> float:
    a = np.array([_acc(c) for c in rows], dtype=float)
    return float(np.nanmean(a)) if a.size else float("nan")


# --------------------------------------------------------------------------
# calibration population


def _pick_stimuli(cfg: dict, p: EvSpdParams):
    c = cfg["calibration"]
    fs = float(cfg["dataset"]["sample_rate_hz"])
    seed = derive_seed(cfg["seed"], _CALIB)
    rec = _channel_signal(cfg, c["noise_sigma"], seed, 0, c["duration_s"])
    x = rec.samples[0]
    truth = rec.truth_us(0)
    delta = float(pick_threshold(rec, cfg["encoder"]["mode"]).values[0])
    hp = _hram_params(cfg, p, ideal=True)
    period = int(c["period_us"])
    n = int(round(period * 1e-6 * fs))
    w = int(round(1e-3 * fs))
    nb = period // p.t_s_us
    margin = float(c["stimulus_margin"])
    silent = np.zeros(n)

    best_spike = None
    for t in truth.tolist():
        i = int(round(t * 1e-6 * fs))
        if i + w > len(x):
            continue
        sp, _ = build_stimuli(x[i:i + w], silent, delta, fs, period)
        g = onset_gain(sp, hp, nb)
        score = abs(math.log(g * margin)) if math.isfinite(g) else math.inf
        if best_spike is None or score < best_spike[0]:
            best_spike = (score, sp)

    best_noise = None
    edges = np.concatenate([[0], truth, [int(c["duration_s"] * 1e6)]])
    guard = 1500
    for a, b in zip(edges[:-1], edges[1:]):
        if b - a < period + 2 * guard:
            continue
        i = int(round((a + guard) * 1e-6 * fs))
        _, nz = build_stimuli(np.zeros(1), x[i:i + n], delta, fs, period)
        g = onset_gain(nz, hp, nb)
        score = abs(math.log(g / margin)) if math.isfinite(g) else math.inf
        if best_noise is None or score < best_noise[0]:
            best_noise = (score, nz)
    if best_spike is None or best_noise is None:
        raise ValueError("could not find calibration stimuli")
    return best_spike[1], best_noise[1]


def _calib_channel(cfg: dict, ch: int, stimuli) -> dict:
    c = cfg["calibration"]
    p = _evspd_params(cfg)
    tol = int(cfg["matching"]["tolerance_us"])
    fs = float(cfg["dataset"]["sample_rate_hz"])
    seed = derive_seed(cfg["seed"], _CALIB)
    rec = _channel_signal(cfg, c["noise_sigma"], seed, ch, c["duration_s"])
    truth = rec.truth_us(0)
    delta = float(pick_threshold(rec, cfg["encoder"]["mode"]).values[0])
    ev, _ = delta_modulate(rec.samples[0], delta, fs)
    hp = _hram_params(cfg, p)
    mm = _mismatch(cfg, derive_seed(cfg["seed"], _CALMM))
    vbp = VbpTable(tuple(c["vbp"]), int(c["default_code"]))
    n_bins = int(math.ceil(c["duration_s"] * 1e6 / p.t_s_us))
    _, before = run_channel(ev, ch, hp, mm, vbp.default_code, vbp, n_bins)
    res = calibrate(stimuli[0], stimuli[1], [ch], hp, mm, vbp, int(c["presentations"]),
                    int(c["period_us"]))
    code = int(res.codes[0])
    _, after = run_channel(ev, ch, hp, mm, code, vbp, n_bins)
    return {"channel": ch, "code": code, "fn": res.fn[0].tolist(), "fp": res.fp[0].tolist(),
            "before": _counts(truth, before, tol), "after": _counts(truth, after, tol)}


# --------------------------------------------------------------------------
# SNR study


def _snr_point(cfg: dict, k: int) -> list[dict]:
    s = cfg["snr_sweep"]
    snr = float(s["snr_db"][k])
    p = _evspd_params(cfg)
    tol = int(cfg["matching"]["tolerance_us"])
    fs = float(cfg["dataset"]["sample_rate_hz"])
    b = cfg["baselines"]
    bp = BaselineParams(neo_thresh_mult=b["neo_thresh_mult"], abs_mult=b["abs_mult"],
                        refractory_us=b["refractory_us"])
    rows = []
    for ch in range(int(s["channels"])):
        rec = _channel_signal(cfg, sigma_for_snr(snr), derive_seed(cfg["seed"], _SNR, k), ch,
                              s["duration_s"], s["firing_rate_hz"])
        x, truth = rec.samples[0], rec.truth_us(0)
        delta = float(pick_threshold(rec, cfg["encoder"]["mode"]).values[0])
        ev, _ = delta_modulate(x, delta, fs)
        rows.append({"snr_db": snr, "channel": ch,
                     "evspd": _counts(truth, detect(ev, p), tol),
                     "neo": _counts(truth, neo_detect(x, fs, bp), tol),
                     "abs": _counts(truth, abs_threshold_detect(x, fs, bp.abs_mult,
                                                                bp.refractory_us), tol)})
    return rows


# --------------------------------------------------------------------------
# reports


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return f"{v:.6f}"
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _metric_row(c):
    tp, fp, fn = (int(v) for v in c)
    sens = tp / (tp + fn) if tp + fn else None
    fdr = fp / (tp + fp) if tp + fp else None
    acc = tp / (tp + fp + fn) if tp + fp + fn else None
    return [tp, fp, fn, sens, fdr, acc]


def _json_num(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return None if math.isnan(v) else round(v, 6)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _random_stream_check(cfg: dict) -> int:
    """Number of random short streams where macro and reference disagree."""
    p = _evspd_params(cfg)
    ideal = _hram_params(cfg, p, ideal=True)
    rng = np.random.default_rng(derive_seed(cfg["seed"], _STREAMS,
                                            cfg["hram"]["random_stream_seed_offset"]))
    bad = 0
    for k in range(int(cfg["hram"]["random_streams"])):
        n = int(rng.integers(0, 400))
        t = np.sort(rng.integers(0, int(rng.integers(1, 50_000)), n))
        pp = p.replace(thr1=float(rng.integers(1, 7)), thr2=int(rng.integers(1, p.n_s + 1)))
        hp = ideal.replace(trip_point=pp.thr1, thr2=pp.thr2)
        _, h = run_channel(t, k % 1024, hp, MismatchSpec.ideal())
        if not np.array_equal(h, detect(t, pp)):
            bad += 1
    return bad


def run_experiment(config=None, out_dir=None, progress: bool = True) -> dict:
    """Run the full benchmark described by ``config`` and write reports.

    Returns the acceptance summary (criterion id -> value, bound, pass).
    """
    cfg = load_config(config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    threads = int(cfg["threads"])
    d = cfg["dataset"]
    tiers = [float(s) for s in d["noise_levels"]]
    nch = int(d["channels"])
    p = _evspd_params(cfg)

    tasks = [(t, c) for t in range(len(tiers)) for c in range(nch)]
    if progress:
        log.info("suite: %d tiers x %d channels x %gs", len(tiers), nch, d["duration_s"])
    suite = _map(lambda tc: _suite_channel(cfg, *tc), tasks, threads)
    by_tier = [[r for r in suite if r["tier"] == t] for t in range(len(tiers))]

    if progress:
        log.info("calibration population: %d channels", cfg["calibration"]["channels"])
    stimuli = _pick_stimuli(cfg, p)
    calib = _map(lambda c: _calib_channel(cfg, c, stimuli),
                 range(int(cfg["calibration"]["channels"])), threads)

    if progress:
        log.info("snr sweep: %d points", len(cfg["snr_sweep"]["snr_db"]))
    snr_rows = [r for rows in _map(lambda k: _snr_point(cfg, k),
                                   range(len(cfg["snr_sweep"]["snr_db"])), threads)
                for r in rows]

    bad_streams = _random_stream_check(cfg) if int(cfg["hram"]["random_streams"]) else 0

    # ---- aggregate
    tier_stats = []
    for t, rows in enumerate(by_tier):
        grid_acc = np.nanmean(accuracy_array(*np.moveaxis(
            np.stack([r["grid"] for r in rows]), -1, 0)), axis=0)
        ts = {f: _mean_acc([r["t_s"][i] for r in rows])
              for i, f in enumerate(cfg["sensitivity"]["t_s_scale"])}
        ds = {f: _mean_acc([r["delta_scaled"][i] for r in rows])
              for i, f in enumerate(cfg["sensitivity"]["delta_scale"])}
        flip_acc = [_mean_acc([r["flips"][k] for r in rows])
                    for k in range(len(rows[0]["flips"]))]
        agree = np.array([_acc(r["agree"]) for r in rows])
        agree = np.where(np.isnan(agree), 1.0, agree)
        tier_stats.append({
            "sigma": tiers[t],
            "evspd": _mean_acc([r["evspd"] for r in rows]),
            "neo": _mean_acc([r["neo"] for r in rows]),
            "abs": _mean_acc([r["abs"] for r in rows]),
            "hram": _mean_acc([r["hram"] for r in rows]),
            "grid": grid_acc, "t_s": ts, "delta": ds, "flips": flip_acc,
            "similarity": float(agree.mean()),
            "mae": sum(r["pattern_abs_diff"] for r in rows) / sum(r["pattern_bins"] for r in rows),
            "event_rate": float(np.mean([r["events"] for r in rows]) / d["duration_s"]),
        })

    summary = _summarize(cfg, tier_stats, suite, calib, bad_streams)

    if cfg["checks"]["properties"]:
        summary["9"] = properties.run_all(derive_seed(cfg["seed"], 99))
    if cfg["checks"]["determinism"]:
        summary["10"] = _determinism_check(cfg)

    if out is not None:
        _write_reports(out, cfg, tier_stats, suite, calib, snr_rows, summary)
    return summary


def _summarize(cfg, tier_stats, suite, calib, bad_streams) -> dict:
    s = {}
    n_diff = sum(not r["hram_equal"] for r in suite)
    s["1"] = {"name": "macro equals reference detector",
              "value": n_diff + bad_streams, "bound": "== 0",
              "pass": n_diff + bad_streams == 0}

    gaps = [abs(t["evspd"] - t["neo"]) for t in tier_stats]
    low = sorted(tier_stats, key=lambda t: t["sigma"])[:2]
    low_min = min(t["evspd"] for t in low)
    s["2"] = {"name": "event detector vs NEO parity",
              "value": {"max_gap": max(gaps), "low_noise_min_accuracy": low_min},
              "bound": "max_gap <= 0.05 and low_noise_min_accuracy >= 0.90",
              "pass": max(gaps) <= 0.05 and low_min >= 0.90}

    lo = min(tier_stats, key=lambda t: t["sigma"])["grid"]
    frac = float(np.mean(lo >= np.nanmax(lo) - 0.03))
    s["3"] = {"name": "threshold plateau on lowest-noise tier", "value": frac,
              "bound": ">= 0.30", "pass": frac >= 0.30}

    base = float(np.mean([t["evspd"] for t in tier_stats]))
    dts = max(abs(float(np.mean([t["t_s"][f] for t in tier_stats])) - base)
              for f in cfg["sensitivity"]["t_s_scale"])
    s["4"] = {"name": "bin length +-20% accuracy change", "value": dts, "bound": "<= 0.01",
              "pass": dts <= 0.01}
    dd = max(abs(float(np.mean([t["delta"][f] for t in tier_stats])) - base)
             for f in cfg["sensitivity"]["delta_scale"])
    s["5"] = {"name": "delta threshold +-20% accuracy change", "value": dd, "bound": "<= 0.01",
              "pass": dd <= 0.01}

    # pooled over the channels of every flip tier, plus the per-tier drops
    flip_t = [t for t in tier_stats if t["flips"]]
    per_tier = {t["sigma"]: t["evspd"] - float(np.mean(t["flips"])) for t in flip_t}
    pooled = float(np.mean(list(per_tier.values()))) if per_tier else float("nan")
    s["6"] = {"name": "latch flip accuracy drop (high-noise tiers)",
              "value": {"pooled_drop": pooled,
                        **{f"drop_sigma_{k:g}": v for k, v in per_tier.items()}},
              "bound": "pooled_drop <= 0.01", "pass": bool(per_tier) and pooled <= 0.01}

    before = np.array([_acc(r["before"]) for r in calib])
    after = np.array([_acc(r["after"]) for r in calib])
    fb = float(np.mean(before < 0.8))
    fa = float(np.mean(after < 0.8))
    d_code = int(cfg["calibration"]["default_code"])
    mono = all(r["fn"][r["code"]] + r["fp"][r["code"]] <= r["fn"][d_code] + r["fp"][d_code]
               for r in calib)
    s["7"] = {"name": "calibration reduces channels below 0.8 accuracy",
              "value": {"fraction_before": fb, "fraction_after": fa,
                        "mean_before": float(np.nanmean(before)),
                        "mean_after": float(np.nanmean(after)), "cost_monotone": mono},
              "bound": "fraction_after < fraction_before and cost_monotone",
              "pass": fa < fb and mono}

    a = cfg["agreement"]
    sim = min(t["similarity"] for t in tier_stats)
    mae = max(t["mae"] for t in tier_stats)
    s["8"] = {"name": "event detector vs absolute threshold agreement",
              "value": {"min_similarity": sim, "max_mae": mae},
              "bound": f"min_similarity >= {a['min_similarity']} and max_mae <= {a['max_mae']}",
              "pass": sim >= a["min_similarity"] and mae <= a["max_mae"]}
    return s


def _determinism_check(cfg: dict) -> dict:
    small = copy.deepcopy(cfg)
    small["dataset"].update(duration_s=2.0, channels=3)
    small["calibration"].update(channels=4, duration_s=2.0)
    small["snr_sweep"].update(snr_db=[10.0, 40.0], channels=1, duration_s=2.0)
    small["hram"]["random_streams"] = 10
    small["flips"]["seeds"] = 2
    small["checks"] = {"properties": False, "determinism": False}
    digests = []
    with tempfile.TemporaryDirectory() as tmp:
        for k, threads in enumerate([1, 1, 2]):
            small["threads"] = threads
            d = Path(tmp) / f"run{k}"
            run_experiment(small, d, progress=False)
            digests.append(tree_digest(d, exclude=("config.json",)))
    ok = len(set(digests)) == 1
    return {"name": "byte-identical reruns and thread independence", "value": ok,
            "bound": "== true", "pass": ok}


def tree_digest(root, exclude=()) -> str:
    """SHA-256 over relative paths and contents of every file under ``root``."""
    h = hashlib.sha256()
    root = Path(root)
    for f in sorted(root.rglob("*")):
        if f.is_file() and f.name not in exclude:
            h.update(str(f.relative_to(root)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    return _json_num(x)


def _write_reports(out: Path, cfg, tier_stats, suite, calib, snr_rows, summary) -> None:
    cfg_out = {k: v for k, v in cfg.items() if k != "threads"}
    (out / "config.json").write_text(json.dumps(_jsonable(cfg_out), indent=2, sort_keys=True)
                                     + "\n")
    tiers = [t["sigma"] for t in tier_stats]

    rows = []
    for r in suite:
        for det in ("evspd", "hram", "neo", "abs"):
            rows.append([tiers[r["tier"]], det, r["channel"], *_metric_row(r[det])])
    _write_csv(out / "metrics.csv",
               ["noise_sigma", "detector", "channel", "tp", "fp", "fn", "sensitivity", "fdr",
                "accuracy"], rows)

    rows = []
    for t in tier_stats:
        for i, t1 in enumerate(cfg["sweep"]["thr1"]):
            for j, t2 in enumerate(cfg["sweep"]["thr2"]):
                rows.append([t["sigma"], t1, t2, float(t["grid"][i, j])])
    _write_csv(out / "sweep.csv", ["noise_sigma", "thr1", "thr2", "mean_accuracy"], rows)

    rows = []
    for t in tier_stats:
        rows.append([t["sigma"], "baseline", 1.0, t["evspd"]])
        for f, v in t["t_s"].items():
            rows.append([t["sigma"], "t_s_us", f, v])
        for f, v in t["delta"].items():
            rows.append([t["sigma"], "delta", f, v])
    _write_csv(out / "sensitivity.csv", ["noise_sigma", "parameter", "scale", "mean_accuracy"],
               rows)

    rows = [[t["sigma"], k, v] for t in tier_stats for k, v in enumerate(t["flips"])]
    rows += [[t["sigma"], "none", t["evspd"]] for t in tier_stats if t["flips"]]
    _write_csv(out / "flips.csv", ["noise_sigma", "seed_index", "mean_accuracy"], rows)

    rows = []
    for r in calib:
        rows.append([r["channel"], r["code"], *r["fn"], *r["fp"], _acc(r["before"]),
                     _acc(r["after"])])
    _write_csv(out / "calibration.csv",
               ["channel", "code", "fn0", "fn1", "fn2", "fn3", "fp0", "fp1", "fp2", "fp3",
                "accuracy_before", "accuracy_after"], rows)

    rows = []
    for r in snr_rows:
        for det in ("evspd", "neo", "abs"):
            rows.append([r["snr_db"], det, r["channel"], *_metric_row(r[det])])
    _write_csv(out / "snr.csv", ["snr_db", "detector", "channel", "tp", "fp", "fn",
                                 "sensitivity", "fdr", "accuracy"], rows)

    rows = [[t["sigma"], t["evspd"], t["neo"], t["abs"], t["hram"], t["similarity"], t["mae"],
             t["event_rate"]] for t in tier_stats]
    _write_csv(out / "tiers.csv", ["noise_sigma", "evspd", "neo", "abs", "hram", "similarity",
                                   "pattern_mae", "events_per_s"], rows)

    (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True)
                                      + "\n")


def format_summary(summary: dict) -> str:
    lines = [f"{'id':>3}  {'pass':<5} {'name':<50} value"]
    for k in sorted(summary, key=int):
        r = summary[k]
        v = r["value"]
        if isinstance(v, dict):
            v = ", ".join(f"{a}={_fmt(b) if isinstance(b, float) else b}" for a, b in v.items())
        elif isinstance(v, float):
            v = _fmt(v)
        lines.append(f"{k:>3}  {str(bool(r['pass'])):<5} {r['name']:<50} {v}  [{r['bound']}]")
    return "\n".join(lines)
