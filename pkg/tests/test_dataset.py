from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evspike.dataset import (
    Recording,
    SynthesisSpec,
    bandpass,
    builtin_templates,
    load_raw,
    read_recording,
    save_raw,
    sigma_for_snr,
    snr_of,
    synthesize,
    synthesize_channel,
    write_recording,
)

FS = 24_000.0


def test_templates_are_distinct_unit_peak_1ms():
    t = builtin_templates(FS)
    assert len(t) >= 4
    for w in t.values():
        assert len(w) == 24
        assert np.max(np.abs(w)) == pytest.approx(1.0)
        assert w[0] == pytest.approx(0.0, abs=1e-12) and w[-1] == pytest.approx(0.0, abs=1e-12)
    ws = list(t.values())
    for i in range(len(ws)):
        for j in range(i + 1, len(ws)):
            assert not np.allclose(ws[i], ws[j])


def test_noiseless_forced_onset_places_template():
    w = builtin_templates(FS)["pos_neg"]
    spec = SynthesisSpec(templates=[w], noise_sigma=0.0, duration_s=0.05, onsets_s=[0.01])
    rec = synthesize(spec)
    x = rec.samples[0]
    i = int(round(0.01 * FS))
    expect = np.zeros_like(x)
    expect[i:i + len(w)] = w
    np.testing.assert_array_equal(x, expect)
    np.testing.assert_allclose(rec.ground_truth[0], [0.01])


def test_poisson_count_within_four_sigma():
    n_exp = 20 * 6
    for seed in range(20):
        rec = synthesize(SynthesisSpec(firing_rate_hz=20, duration_s=6, rng_seed=seed))
        assert abs(len(rec.ground_truth[0]) - n_exp) <= 4 * math.sqrt(n_exp)


def test_onsets_respect_min_separation():
    rec = synthesize(SynthesisSpec(firing_rate_hz=200, duration_s=2, rng_seed=1))
    assert np.min(np.diff(rec.ground_truth[0])) >= 2e-3 - 1 / FS


def test_noise_tiers():
    recs = [synthesize(SynthesisSpec(noise_sigma=s, firing_rate_hz=0, duration_s=2))
            for s in (0.05, 0.10, 0.15, 0.20)]
    sds = [r.samples.std() for r in recs]
    np.testing.assert_allclose(sds, [0.05, 0.10, 0.15, 0.20], rtol=0.03)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), ch=st.integers(0, 5))
def test_channels_regenerate_independently(seed, ch):
    spec = SynthesisSpec(duration_s=0.2, channels=6, rng_seed=seed, firing_rate_hz=50)
    rec = synthesize(spec)
    x, t = synthesize_channel(spec, ch)
    np.testing.assert_array_equal(rec.samples[ch], x)
    np.testing.assert_array_equal(rec.ground_truth[ch], t)


def test_synthesis_is_deterministic():
    spec = SynthesisSpec(duration_s=0.5, channels=2, rng_seed=9)
    np.testing.assert_array_equal(synthesize(spec).samples, synthesize(spec).samples)


@pytest.mark.parametrize("kw", [dict(duration_s=0), dict(templates=[]), dict(noise_sigma=-1),
                                dict(channels=0), dict(templates=[np.array([])])])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SynthesisSpec(**kw)


# raw files


def test_load_raw_deinterleaves(tmp_path):
    p = tmp_path / "r.bin"
    np.array([1, 2, 3, 4, 5, 6], dtype="<i2").tofile(p)
    rec = load_raw(p, 30000.0, 2, "i16le", gain=0.5)
    np.testing.assert_array_equal(rec.samples, [[0.5, 1.5, 2.5], [1.0, 2.0, 3.0]])


def test_load_raw_empty(tmp_path):
    p = tmp_path / "e.bin"
    p.write_bytes(b"")
    rec = load_raw(p, 30000.0, 384)
    assert rec.channels == 384 and rec.n_samples == 0


def test_load_raw_truncated(tmp_path):
    p = tmp_path / "t.bin"
    p.write_bytes(b"\0" * (383 * 2))
    with pytest.raises(ValueError, match="truncated"):
        load_raw(p, 30000.0, 384)


def test_recording_roundtrip(tmp_path):
    rec = synthesize(SynthesisSpec(duration_s=0.3, channels=3, rng_seed=2))
    write_recording(rec, tmp_path / "rec")
    back = read_recording(tmp_path / "rec")
    np.testing.assert_allclose(back.samples, rec.samples, rtol=1e-6, atol=1e-7)
    for a, b in zip(back.ground_truth, rec.ground_truth):
        np.testing.assert_array_equal(a, b)


def test_int16_save_load(tmp_path):
    rec = Recording(FS, np.array([[0.0, 1.0, -1.0], [0.5, 0.25, 0.0]]))
    save_raw(rec, tmp_path / "x.bin", "i16le", gain=1 / 1000)
    back = load_raw(tmp_path / "x.bin", FS, 2, "int16", gain=1 / 1000)
    np.testing.assert_allclose(back.samples, rec.samples)


# band-pass


def _tone(f, n=48_000, fs=FS):
    return np.sin(2 * np.pi * f * np.arange(n) / fs)


def _rms_gain(x, y):
    m = slice(len(x) // 4, 3 * len(x) // 4)
    return np.sqrt(np.mean(y[m] ** 2) / np.mean(x[m] ** 2))


def test_bandpass_rejects_dc():
    y = bandpass(Recording(FS, np.full((1, 48_000), 3.0))).samples[0]
    assert np.max(np.abs(y[4800:-4800])) < 1e-6 * 3.0


def test_bandpass_midband_preserved():
    f = math.sqrt(300 * 3000)
    x = _tone(f)
    y = bandpass(Recording(FS, x[None])).samples[0]
    assert _rms_gain(x, y) == pytest.approx(1.0, abs=0.05)


def test_bandpass_low_tone_attenuated():
    x = _tone(30.0, n=240_000)
    y = bandpass(Recording(FS, x[None])).samples[0]
    assert 20 * math.log10(_rms_gain(x, y)) <= -20


def test_bandpass_rejects_bad_band():
    with pytest.raises(ValueError):
        bandpass(Recording(FS, np.zeros((1, 100))), 3000, 300)


# SNR


def test_sigma_for_snr_definition():
    assert sigma_for_snr(20.0) == pytest.approx(0.1)
    assert 20 * math.log10(1.0 / sigma_for_snr(37.5)) == pytest.approx(37.5)


def test_snr_noiseless_is_infinite():
    rec = synthesize(SynthesisSpec(noise_sigma=0.0, duration_s=1.0))
    assert snr_of(rec) == math.inf


def test_snr_roundtrip_40db():
    rec = synthesize(SynthesisSpec(noise_sigma=sigma_for_snr(40.0), duration_s=6.0, rng_seed=3))
    assert snr_of(rec) == pytest.approx(40.0, abs=1.0)
