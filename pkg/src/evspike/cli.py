"""Command-line entry point.

Every flag of the form ``--config/--seed/--threads/--out`` can also be set
through ``EVSPIKE_CONFIG``, ``EVSPIKE_SEED``, ``EVSPIKE_THREADS`` and
``EVSPIKE_OUT``; an explicit flag wins over the environment.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

ENV_PREFIX = "EVSPIKE_"
log = logging.getLogger("evspike")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _env(name, cast=str):
    v = os.environ.get(ENV_PREFIX + name.upper())
    return None if v in (None, "") else cast(v)


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--threads", type=int, help="worker threads")
    p.add_argument("--out", required=False, help="output path")
    p.set_defaults(_out_required=out_required)


def _resolve_common(args) -> None:
    for name, cast in (("config", str), ("seed", int), ("threads", int), ("out", str)):
        if getattr(args, name, None) is None:
            setattr(args, name, _env(name, cast))
    if args._out_required and not args.out:
        raise UsageError("--out is required")


def _write_spikes(path, dets, channels=None) -> None:
    channels = range(len(dets)) if channels is None else channels
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["channel", "t_us"])
        for c, d in zip(channels, dets):
            for t in np.asarray(d).tolist():
                w.writerow([c, t])


def _read_spikes(path) -> dict[int, np.ndarray]:
    out: dict[int, list] = {}
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        if r.fieldnames is None or not {"channel", "t_us"} <= set(r.fieldnames):
            raise ValueError(f"{path}: expected header channel,t_us")
        for row in r:
            out.setdefault(int(row["channel"]), []).append(int(row["t_us"]))
    return {c: np.sort(np.asarray(v, dtype=np.int64)) for c, v in out.items()}


def _params(args):
    from .evspd import EvSpdParams
    from .experiment import load_config

    if args.params:
        return EvSpdParams.load(args.params)
    cfg = load_config(args.config)
    return EvSpdParams(**cfg["evspd"])


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    from .dataset import SynthesisSpec, synthesize, write_recording
    from .experiment import derive_seed

    seed = 0 if args.seed is None else args.seed
    levels = [float(x) for x in args.noise.split(",") if x]
    if not levels:
        raise UsageError("--noise needs at least one level")
    out = Path(args.out)
    for k, sigma in enumerate(levels):
        spec = SynthesisSpec(noise_sigma=sigma, duration_s=args.duration, channels=args.channels,
                             rng_seed=derive_seed(seed, 1, k), firing_rate_hz=args.rate)
        d = out / f"noise{sigma:g}"
        write_recording(synthesize(spec), d)
        log.info("wrote %s", d)
    return 0


def cmd_encode(args) -> int:
    from .dataset import bandpass, read_recording
    from .encoder import encode_recording, pick_threshold, write_aer, write_aer_csv

    rec = read_recording(args.input)
    if not args.no_bandpass:
        rec = bandpass(rec, args.low, args.high)
    th = pick_threshold(rec, args.mode)
    stream = encode_recording(rec, th)
    out = Path(args.out)
    if out.suffix == ".csv":
        write_aer_csv(stream, out)
    else:
        write_aer(stream, out)
    thr_path = out.with_suffix(".thresholds.csv")
    with open(thr_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["channel", "threshold", "fallback"])
        for c, (v, fb) in enumerate(zip(th.values, th.fallback)):
            w.writerow([c, repr(float(v)), int(fb)])
    log.info("%d events over %d channels", len(stream), rec.channels)
    return 0


def _read_events(path):
    from .encoder import read_aer, read_aer_csv

    path = Path(path)
    return read_aer_csv(path) if path.suffix == ".csv" else read_aer(path)


def cmd_detect(args) -> int:
    from .evspd import detect

    stream = _read_events(args.events)
    p = _params(args)
    n = max(stream.n_channels, args.channels or 0)
    dets = [detect(t, p) for t, _ in stream.split(n)]
    _write_spikes(args.out, dets)
    log.info("%d detections", sum(len(d) for d in dets))
    return 0


def _mismatch_from(path):
    from .hram import MismatchSpec

    if not path:
        return MismatchSpec.ideal()
    d = json.loads(Path(path).read_text())
    d.pop("doc", None)
    return MismatchSpec(**d)


def _hram_from(args):
    from .experiment import load_config
    from .hram import HramParams

    p = _params(args)
    cfg = load_config(args.config)
    h = cfg["hram"]
    return HramParams.from_evspd(p, trip_point=p.thr1 + h["trip_offset"],
                                 dead_fraction=h["dead_fraction"], leak_tau_us=h["leak_tau_us"])


def _vbp_from(args):
    from .experiment import load_config
    from .hram import VbpTable

    c = load_config(args.config)["calibration"]
    return VbpTable(tuple(c["vbp"]), c["default_code"])


def _read_stimuli(spec: str):
    parts = [s for s in spec.split(",") if s]
    if len(parts) != 2:
        raise UsageError("--stimuli expects spike.aer,noise.aer")
    return [_read_events(p).t_us for p in parts]


def _read_codes(path) -> dict[int, int]:
    with open(path, newline="") as f:
        return {int(r["channel"]): int(r["code"]) for r in csv.DictReader(f)}


def cmd_macro_run(args) -> int:
    from .hram import calibrate, run_macro

    stream = _read_events(args.events)
    hp = _hram_from(args)
    mm = _mismatch_from(args.mismatch)
    chans = list(range(max(stream.n_channels, args.channels or 0)))
    if args.vbp == "auto":
        if not args.stimuli:
            raise UsageError("--vbp auto needs --stimuli")
        sp, nz = _read_stimuli(args.stimuli)
        codes = calibrate(sp, nz, chans, hp, mm, _vbp_from(args)).codes
    elif args.vbp.isdigit():
        codes = int(args.vbp)
    else:
        table = _read_codes(args.vbp)
        codes = [table.get(c, 1) for c in chans]
    res = run_macro(stream, hp, mm, codes, _vbp_from(args), channels=chans)
    outs = args.out.split(",")
    if len(outs) != 2:
        raise UsageError("--out expects counters.csv,spikes.csv")
    with open(outs[0], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["channel", "period", "counter"])
        for c, s in zip(res.channels, res.counters):
            for i in np.flatnonzero(s).tolist():
                w.writerow([c, i, int(s[i])])
    _write_spikes(outs[1], res.detections, res.channels)
    return 0


def cmd_calibrate(args) -> int:
    from .hram import calibrate

    sp, nz = _read_stimuli(args.stimuli)
    res = calibrate(sp, nz, range(args.channels), _hram_from(args), _mismatch_from(args.mismatch),
                    _vbp_from(args))
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["channel", "code", "fn", "fp"])
        for row in res.rows():
            w.writerow(row)
    return 0


def cmd_baseline(args) -> int:
    from .baselines import BaselineParams, run_baseline
    from .dataset import bandpass, read_recording

    rec = read_recording(args.input)
    if not args.no_bandpass:
        rec = bandpass(rec)
    bp = BaselineParams(neo_thresh_mult=args.neo_mult, abs_mult=args.abs_mult)
    dets = [run_baseline(args.method, rec.samples[c], rec.sample_rate_hz, bp)
            for c in range(rec.channels)]
    _write_spikes(args.out, dets)
    return 0


def cmd_evaluate(args) -> int:
    from .dataset import read_ground_truth
    from .evaluation import match_spikes, metrics

    det = _read_spikes(args.detections)
    n = args.channels or (max(det) + 1 if det else 0)
    truth = read_ground_truth(args.truth, n)
    rows = []
    for c in range(n):
        t = np.rint(np.asarray(truth[c]) * 1e6).astype(np.int64)
        m = match_spikes(t, det.get(c, np.empty(0, np.int64)), args.tolerance)
        k = metrics(m)
        rows.append([c, m.tp, m.fp, m.fn, k.sensitivity, k.fdr, k.accuracy])
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["channel", "tp", "fp", "fn", "sensitivity", "fdr", "accuracy"])
        for r in rows:
            w.writerow(["" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)
                        for v in r])
    acc = [r[-1] for r in rows if r[-1] is not None]
    print(f"channels={n} mean_accuracy={np.mean(acc):.6f}" if acc else f"channels={n}")
    return 0


def cmd_sweep(args) -> int:
    from .dataset import read_ground_truth
    from .evspd import sweep_thresholds

    stream = _read_events(args.events)
    per = stream.split(stream.n_channels)
    truth = read_ground_truth(args.truth, len(per))
    tr = [np.rint(np.asarray(t) * 1e6).astype(np.int64) for t in truth]
    res = sweep_thresholds([t for t, _ in per], tr, range(1, 7), range(1, 8), _params(args),
                           args.tolerance)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["thr1", "thr2", "mean_accuracy"])
        for i, a in enumerate(res.thr1):
            for j, b in enumerate(res.thr2):
                w.writerow([f"{a:g}", int(b), f"{res.accuracy[i, j]:.6f}"])
    t1, t2 = res.argmax
    print(f"best thr1={t1:g} thr2={t2} accuracy={res.max_accuracy:.6f}")
    return 0


def cmd_reproduce(args) -> int:
    from .experiment import format_summary, load_config, run_experiment

    cfg = load_config(args.config, seed=args.seed, threads=args.threads)
    summary = run_experiment(cfg, args.out)
    print(format_summary(summary))
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="evspike", description="Event-based spike detection toolkit")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    ap.add_argument("--dump-config", action="store_true",
                    help="print the default config with field docs and exit")
    ap.add_argument("--dump-params", action="store_true",
                    help="print the default detector parameter file and exit")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("generate", help="synthesize noisy recordings with ground truth")
    _common(p, out_required=True)
    p.add_argument("--noise", default="0.05,0.1,0.15,0.2")
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--rate", type=float, default=60.0, help="firing rate (Hz)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("encode", help="delta-modulate a recording into AER events")
    _common(p, out_required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--mode", default="frac-peak:0.1")
    p.add_argument("--low", type=float, default=300.0)
    p.add_argument("--high", type=float, default=3000.0)
    p.add_argument("--no-bandpass", action="store_true")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("detect", help="event-domain spike detection")
    _common(p, out_required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--params", help="detector parameter JSON")
    p.add_argument("--channels", type=int)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("macro-run", help="run the in-memory macro model")
    _common(p, out_required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--params")
    p.add_argument("--mismatch", help="MismatchSpec JSON")
    p.add_argument("--vbp", default="1", help="code 0-3, a channel,code CSV, or auto")
    p.add_argument("--stimuli", help="spike.aer,noise.aer for --vbp auto")
    p.add_argument("--channels", type=int)
    p.set_defaults(func=cmd_macro_run)

    p = sub.add_parser("calibrate", help="choose a bias code per channel")
    _common(p, out_required=True)
    p.add_argument("--stimuli", required=True)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--params")
    p.add_argument("--mismatch")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("baseline", help="sample-domain reference detectors")
    _common(p, out_required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--method", choices=["neo", "edlpf", "abs"], default="neo")
    p.add_argument("--neo-mult", type=float, default=6.0)
    p.add_argument("--abs-mult", type=float, default=4.0)
    p.add_argument("--no-bandpass", action="store_true")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="score detections against ground truth")
    _common(p, out_required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--tolerance", type=int, default=1000)
    p.add_argument("--channels", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="accuracy over the thr1 x thr2 grid")
    _common(p, out_required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--params")
    p.add_argument("--tolerance", type=int, default=1000)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("reproduce", help="run the full benchmark and acceptance summary")
    _common(p, out_required=True)
    p.set_defaults(func=cmd_reproduce)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        if args.dump_config:
            from .experiment import config_with_docs
            sys.stdout.write(config_with_docs())
            return 0
        if args.dump_params:
            from .evspd import EvSpdParams
            sys.stdout.write(EvSpdParams().to_json())
            return 0
        if not args.command:
            raise UsageError("missing subcommand")
        _resolve_common(args)
        return int(args.func(args) or 0)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
        kind = "io" if isinstance(e, OSError) else "invalid"
        msg = str(e).replace("\n", " ")
        print(f"error: {kind}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
