from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from evspike.dataset import Recording, SynthesisSpec, bandpass, builtin_templates, synthesize
from evspike.encoder import (
    AerEvent,
    DeltaModulator,
    EventStream,
    ThresholdMode,
    delta_levels,
    delta_modulate,
    encode_recording,
    make_address,
    merge_channels,
    pick_threshold,
    read_aer,
    read_aer_csv,
    reconstruct,
    write_aer,
    write_aer_csv,
)

FS = 24_000.0

# Frozen from a plain-Python float transcription of the modulator (pulses at
# linspace(i, i+1, n) sample positions, rounded to us, collisions bumped).
POS_NEG_T = [83, 125, 139, 153, 167, 168, 177, 188, 198, 208, 209, 250, 260, 271, 281, 292,
             293, 306, 319, 333, 334, 347, 361, 375, 376, 389, 403, 417, 458, 500, 501, 514,
             528, 542, 543, 563, 583, 584, 625, 626, 667, 708, 750, 792, 793, 833, 834]
POS_NEG_P = [1] * 10 + [-1] * 18 + [1] * 13 + [-1] * 6


def _python_modulator(sig, thr, fs):
    out, v, us, last = [], 0.0, 1e6 / fs, -1
    for i, x in enumerate(sig):
        d = x - v
        if d > thr:
            n, pol = int(np.floor(d / thr)), 1
        elif d < -thr:
            n, pol = int(np.floor(-d / thr)), -1
        else:
            continue
        for pos in np.linspace(i, i + 1, n):
            t = int(np.floor(pos * us + 0.5))
            t = max(t, last + 1)
            out.append((t, pol))
            last = t
        v += pol * n * thr
    return out


def test_constant_signal_no_pulses():
    t, p = delta_modulate(np.full(100, 0.05), 0.1, FS)
    assert len(t) == 0 and len(p) == 0


def test_positive_step_example():
    m = DeltaModulator(0.1, FS)
    t, p, _ = m.process([0.0, 0.35])
    assert p.tolist() == [1, 1, 1]
    assert all(41 <= x <= 84 for x in t.tolist())
    assert m.v_reset == pytest.approx(0.3)


def test_negative_step_example():
    m = DeltaModulator(0.1, FS)
    t, p, _ = m.process([0.0, -0.25])
    assert p.tolist() == [-1, -1]
    assert m.v_reset == pytest.approx(-0.2)


def test_template_pulses_frozen():
    w = builtin_templates(FS)["pos_neg"]
    t, p = delta_modulate(w, 0.1, FS)
    assert t.tolist() == POS_NEG_T
    assert p.tolist() == POS_NEG_P
    assert [(a, b) for a, b in zip(POS_NEG_T, POS_NEG_P)] == _python_modulator(w, 0.1, FS)


def test_matches_python_modulator_on_noisy_spikes():
    rec = synthesize(SynthesisSpec(noise_sigma=0.1, duration_s=0.5, rng_seed=4))
    x = rec.samples[0]
    t, p = delta_modulate(x, 0.1, FS)
    assert list(zip(t.tolist(), p.tolist())) == _python_modulator(x, 0.1, FS)


def test_streaming_equals_batch():
    x = synthesize(SynthesisSpec(noise_sigma=0.1, duration_s=0.2, rng_seed=5)).samples[0]
    t, p = delta_modulate(x, 0.08, FS)
    m = DeltaModulator(0.08, FS)
    parts = [m.process(x[a:a + 333]) for a in range(0, len(x), 333)]
    np.testing.assert_array_equal(np.concatenate([q[0] for q in parts]), t)
    np.testing.assert_array_equal(np.concatenate([q[1] for q in parts]), p)


signals = arrays(np.float64, st.integers(1, 60),
                 elements=st.floats(-5, 5, allow_nan=False, allow_subnormal=False))
thresholds = st.floats(0.01, 2.0)


def _ties(x, thr):
    # samples whose distance to a level is an exact multiple of the step
    r = np.asarray(x) / thr
    return np.isclose(r, np.round(r), rtol=0, atol=1e-9)


@settings(max_examples=300, deadline=None)
@given(x=signals, thr=thresholds)
def test_residual_bound(x, thr):
    lv = delta_levels(x, thr)
    r = np.abs(x - lv)
    # an exact tie (difference == threshold) emits nothing under the strict test
    assert np.all(r <= thr * (1 + 1e-12))
    assert np.all((r < thr) | _ties(x, thr))


@settings(max_examples=200, deadline=None)
@given(x=signals, thr=thresholds)
def test_timestamps_strictly_increase_and_levels_consistent(x, thr):
    t, p = delta_modulate(x, thr, FS)
    assert np.all(np.diff(t) > 0)
    if len(p):
        assert reconstruct(t, p, thr)[-1] == pytest.approx(delta_levels(x, thr)[-1])


@settings(max_examples=100, deadline=None)
@given(x=signals, thr=thresholds)
def test_reconstruction_at_sample_boundaries(x, thr):
    m = DeltaModulator(thr, FS)
    t_all, p_all = [], []
    for xi in x:
        t, p, _ = m.process([xi])
        t_all += t.tolist()
        p_all += p.tolist()
        xhat = reconstruct(np.array(t_all), np.array(p_all, np.int8), thr)
        level = xhat[-1] if len(xhat) else 0.0
        assert abs(xi - level) <= thr * (1 + 1e-12)


def test_reconstruct_examples():
    assert reconstruct([], [], 0.1).size == 0
    assert reconstruct([], [], 0.1, at_us=[0, 10]).tolist() == [0.0, 0.0]
    assert reconstruct([1, 2, 3, 4], [1, 1, 1, -1], 0.1)[-1] == pytest.approx(0.2)
    assert reconstruct([1, 2, 3, 4], [1, 1, 1, -1], 0.1, at_us=[0, 2, 9]).tolist() == \
        pytest.approx([0.0, 0.2, 0.2])


def test_delta_rejects_bad_input():
    with pytest.raises(ValueError):
        delta_modulate([], 0.1, FS)
    with pytest.raises(ValueError):
        delta_modulate([0.0, 1.0], 0.0, FS)


# thresholds


def test_threshold_mode_parse():
    assert ThresholdMode.parse("fraction-of-peak:0.1") == ThresholdMode("frac-peak", 0.1)
    assert str(ThresholdMode.parse("rate:2500")) == "rate:2500"
    for bad in ("peak", "frac-peak:", "frac-peak:-1", "bogus:1"):
        with pytest.raises(ValueError):
            ThresholdMode.parse(bad)


def _noiseless(template, n_spikes=5):
    on = [0.01 + 0.005 * k for k in range(n_spikes)]
    return synthesize(SynthesisSpec(templates=[template], noise_sigma=0.0, duration_s=0.05,
                                    onsets_s=on))


def test_frac_peak_threshold():
    rec = _noiseless(builtin_templates(FS)["neg_pos_fast"])
    assert pick_threshold(rec, "frac-peak:0.1").values[0] == pytest.approx(0.1)


def test_frac_p2p_threshold():
    w = builtin_templates(FS)["pos_neg"]
    w = w * (1.6 / np.ptp(w))
    rec = _noiseless(w)
    assert pick_threshold(rec, "frac-p2p:0.5").values[0] == pytest.approx(0.8)


def test_fixed_threshold():
    rec = synthesize(SynthesisSpec(duration_s=0.1, channels=3))
    th = pick_threshold(rec, "fixed:0.07")
    assert th.values.tolist() == [0.07] * 3 and not th.fallback.any()


def test_fallback_without_spikes():
    rec = Recording(FS, np.zeros((2, 100)), [np.empty(0), np.empty(0)])
    th = pick_threshold(rec, "frac-peak:0.1")
    assert th.fallback.all() and th.values.tolist() == [0.1, 0.1]


@pytest.mark.slow
def test_rate_mode_384_channels():
    rec = bandpass(synthesize(SynthesisSpec(noise_sigma=0.1, duration_s=0.25, channels=384,
                                            rng_seed=11)))
    stream = encode_recording(rec, pick_threshold(rec, "rate:2500"))
    total = len(stream) / rec.duration_s
    assert abs(total - 384 * 2500) <= 0.2 * 384 * 2500


# streams


def test_single_channel_merge_equals_modulator():
    x = synthesize(SynthesisSpec(noise_sigma=0.05, duration_s=0.2)).samples
    s = encode_recording(Recording(FS, x), [0.1])
    t, p = delta_modulate(x[0], 0.1, FS)
    np.testing.assert_array_equal(s.t_us, t)
    np.testing.assert_array_equal(s.polarity, p)
    assert set(s.address.tolist()) == {0}


def test_identical_channels_interleave():
    x = synthesize(SynthesisSpec(noise_sigma=0.05, duration_s=0.2)).samples[0]
    s = encode_recording(Recording(FS, np.vstack([x, x])), [0.1, 0.1])
    assert np.count_nonzero(s.address == 0) == np.count_nonzero(s.address == 1)
    np.testing.assert_array_equal(s.address, np.tile([0, 1], len(s) // 2))
    (t0, _), (t1, _) = s.split()
    np.testing.assert_array_equal(t0, t1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 10_000), max_size=30), min_size=1, max_size=6))
def test_merge_is_time_then_address_ordered(chans):
    pulses = [(np.sort(np.unique(c)), np.ones(len(np.unique(c)), np.int8)) for c in chans]
    s = merge_channels(pulses)
    key = s.t_us * 2048 + s.address
    assert np.all(np.diff(key) > 0)
    for a, (t, _) in enumerate(s.split(len(chans))):
        np.testing.assert_array_equal(t, pulses[a][0])


def test_address_bits():
    assert make_address(7, 127) == 1023
    e = AerEvent(5, make_address(3, 9), 1)
    assert (e.bank, e.channel_in_bank) == (3, 9)
    with pytest.raises(ValueError):
        make_address(8, 0)


def test_too_many_channels():
    with pytest.raises(ValueError):
        merge_channels([(np.array([1]), np.array([1]))], addresses=[1024])


def test_aer_binary_layout(tmp_path):
    s = EventStream([7, 9], [3, 1000], [1, -1])
    write_aer(s, tmp_path / "e.aer")
    raw = (tmp_path / "e.aer").read_bytes()
    assert raw == b"AER1" + struct.pack("<I", 2) + struct.pack("<IHbB", 7, 3, 1, 0) \
        + struct.pack("<IHbB", 9, 1000, -1, 0)
    back = read_aer(tmp_path / "e.aer")
    np.testing.assert_array_equal(back.t_us, s.t_us)
    np.testing.assert_array_equal(back.address, s.address)
    np.testing.assert_array_equal(back.polarity, s.polarity)


def test_aer_csv_mirror(tmp_path):
    s = EventStream([7, 9], [3, 4], [1, -1])
    write_aer_csv(s, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines() == ["t_us,address,polarity",
                                                            "7,3,1", "9,4,-1"]
    back = read_aer_csv(tmp_path / "e.csv")
    np.testing.assert_array_equal(back.address, [3, 4])


def test_aer_rejects_corrupt(tmp_path):
    (tmp_path / "x.aer").write_bytes(b"AER1" + struct.pack("<I", 3) + b"\0" * 8)
    with pytest.raises(ValueError):
        read_aer(tmp_path / "x.aer")
    (tmp_path / "y.aer").write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        read_aer(tmp_path / "y.aer")
