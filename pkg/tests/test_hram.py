from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evspike.dataset import SynthesisSpec, builtin_templates, synthesize
from evspike.encoder import EventStream, encode_recording, merge_channels
from evspike.evspd import EvSpdParams, detect
from evspike.hram import (
    BitcellModel,
    ChannelHram,
    HramParams,
    MismatchSpec,
    VbpTable,
    build_stimuli,
    calibrate,
    channel_bits,
    choose_code,
    counter_trace,
    draw_mismatch,
    drop_dead,
    onset_gain,
    run_channel,
    run_macro,
    step_cycle,
)

FS = 24_000.0
IDEAL = HramParams.ideal()
OFF = MismatchSpec.ideal()


def test_step_cycle_five_events():
    ch = ChannelHram.build(0, IDEAL, OFF)
    before = ch.counter
    assert ch.bitcells[0].stored_bit == 0
    c = step_cycle(ch, [10, 20, 30, 40, 50], IDEAL, OFF)
    cell = ch.bitcells[0]
    assert cell.v_cap == pytest.approx(5.0)
    assert cell.stored_bit == 1
    assert c == before + 1
    assert ch.pointer == 1


def test_zero_events_store_zero():
    ch = ChannelHram.build(0, IDEAL, OFF)
    for _ in range(20):
        step_cycle(ch, [], IDEAL, OFF)
    assert ch.stored_bits == [0] * 8 and ch.counter == 0


def test_step_cycle_rejects_foreign_events():
    ch = ChannelHram.build(0, IDEAL, OFF)
    with pytest.raises(ValueError, match="outside period"):
        step_cycle(ch, [125], IDEAL, OFF)


def test_latch_strict_trip():
    cell = BitcellModel(1.0, 3.5)
    for _ in range(3):
        cell.accumulate(1.0)
    cell.accumulate(0.5)
    assert cell.latch(None, OFF) == 0
    cell.accumulate(1e-9)
    assert cell.latch(None, OFF) == 1


def test_flip_rates_monte_carlo():
    n = 100_000
    mm = MismatchSpec(flip_prob_pos=0.017, flip_prob_neg=0.03, rng_seed=3)
    gain, trip = draw_mismatch(mm, 0, IDEAL)
    high = np.repeat(np.arange(n) * 125, 5)  # five events in every period
    bits_hi = channel_bits(high, IDEAL, n, gain, trip, 1.0, np.random.default_rng(1), mm)
    bits_lo = channel_bits(np.empty(0, np.int64), IDEAL, n, gain, trip, 1.0,
                           np.random.default_rng(2), mm)
    assert 1 - bits_hi.mean() == pytest.approx(0.017, abs=0.003)
    assert bits_lo.mean() == pytest.approx(0.03, abs=0.003)


# equivalence with the reference detector

streams = st.lists(st.integers(0, 40_000), max_size=500).map(sorted)
evp = st.builds(EvSpdParams, t_s_us=st.sampled_from([100, 125, 150]), n_s=st.integers(2, 10),
                thr1=st.sampled_from([1, 2, 3, 4]), thr2=st.integers(1, 2),
                refractory_us=st.sampled_from([0, 1000]))


@settings(max_examples=300, deadline=None)
@given(t=streams, p=evp, ch=st.integers(0, 1023))
def test_ideal_macro_equals_reference(t, p, ch):
    _, d = run_channel(t, ch, HramParams.ideal(p), OFF)
    assert d.tolist() == detect(t, p).tolist()


def test_ideal_macro_on_recording():
    rec = synthesize(SynthesisSpec(noise_sigma=0.15, duration_s=3.0, channels=5, rng_seed=8,
                                   firing_rate_hz=60))
    stream = encode_recording(rec, [0.1] * 5)
    res = run_macro(stream, IDEAL, OFF)
    for c, (t, _) in enumerate(stream.split(5)):
        np.testing.assert_array_equal(res.detections[c], detect(t))


mismatches = st.builds(MismatchSpec, jump_cv=st.sampled_from([0.0, 0.1, 0.3]),
                       trip_cv=st.sampled_from([0.0, 0.05]),
                       flip_prob_pos=st.sampled_from([0.0, 0.017, 0.3]),
                       flip_prob_neg=st.sampled_from([0.0, 0.03, 0.3]),
                       rng_seed=st.integers(0, 1000), jump_shared=st.sampled_from([0.0, 0.5, 1.0]))
hparams = st.builds(HramParams, dead_fraction=st.sampled_from([0.0, 0.0064, 0.2]),
                    leak_tau_us=st.sampled_from([None, 50.0, 500.0]),
                    trip_point=st.sampled_from([2.5, 3.5, 4.2]))


@settings(max_examples=100, deadline=None)
@given(t=st.lists(st.integers(0, 5_000), max_size=200).map(sorted), mm=mismatches, hp=hparams,
       ch=st.integers(0, 50), code=st.integers(0, 3))
def test_stepwise_equals_vectorized(t, mm, hp, ch, code):
    n_bins = 5_000 // hp.t_s_us + hp.n_s
    s_vec, _ = run_channel(t, ch, hp, mm, code, n_bins=n_bins)
    cell = ChannelHram.build(ch, hp, mm, code)
    t = np.asarray(t, dtype=np.int64)
    trace = []
    for b in range(n_bins):
        ev = t[(t >= b * hp.t_s_us) & (t < (b + 1) * hp.t_s_us)]
        trace.append(step_cycle(cell, ev, hp, mm))
    assert trace == s_vec.tolist()


@settings(max_examples=100, deadline=None)
@given(t=streams, mm=mismatches, hp=hparams)
def test_counter_within_bounds(t, mm, hp):
    s, _ = run_channel(t, 3, hp, mm)
    assert s.min(initial=0) >= 0 and s.max(initial=0) <= hp.n_s


def test_counter_trace_is_popcount():
    bits = [1, 0, 1, 1, 0, 1, 0, 1, 1, 1]
    assert counter_trace(bits, 8).tolist() == [1, 1, 2, 3, 3, 4, 4, 5, 5, 6]


def test_dead_window_drops_period_start():
    hp = HramParams()
    assert drop_dead([0, 1, 125, 126, 250], hp).tolist() == [1, 126]
    assert drop_dead([0, 125], IDEAL).tolist() == [0, 125]


def test_leakage_weakens_early_events():
    hp = HramParams.ideal().replace(leak_tau_us=30.0)
    early = [0, 1, 2, 3, 4]
    late = [120, 121, 122, 123, 124]
    g, tr = draw_mismatch(OFF, 0, hp)
    assert channel_bits(early, hp, 1, g, tr, 1.0, None, OFF).tolist() == [0]
    assert channel_bits(late, hp, 1, g, tr, 1.0, None, OFF).tolist() == [1]


def test_mismatch_draws():
    mm = MismatchSpec(jump_cv=0.1, trip_cv=0.05, rng_seed=4)
    g1, t1 = draw_mismatch(mm, 7, IDEAL)
    g2, t2 = draw_mismatch(mm, 7, IDEAL)
    np.testing.assert_array_equal(g1, g2)
    assert not np.array_equal(g1, draw_mismatch(mm, 8, IDEAL)[0])
    g, t = draw_mismatch(OFF, 7, IDEAL)
    assert g.tolist() == [1.0] * 8 and t.tolist() == [3.5] * 8
    gains = np.concatenate([draw_mismatch(mm, c, IDEAL)[0] for c in range(2000)])
    assert gains.std() == pytest.approx(0.1, rel=0.1)


def test_shared_fraction_controls_spread():
    mm = MismatchSpec(jump_cv=0.2, jump_shared=1.0, rng_seed=1)
    g, _ = draw_mismatch(mm, 0, IDEAL)
    assert np.ptp(g) == pytest.approx(0.0)


def test_vbp_table():
    v = VbpTable()
    assert [v[k] for k in range(4)] == [1.25, 1.0, 0.85, 0.7]
    with pytest.raises(ValueError):
        v[4]
    with pytest.raises(ValueError):
        VbpTable((1.0, 1.25, 0.85, 0.7))
    with pytest.raises(ValueError):
        VbpTable((1.25, 1.0, 0.85))


def test_routing_by_address():
    a = [np.array([100, 200, 300]) + 10 * k for k in range(3)]
    stream = merge_channels([(x, np.ones(3, np.int8)) for x in a], addresses=[5, 130, 900])
    res = run_macro(stream, IDEAL, OFF)
    assert res.channels == [5, 130, 900]
    by = run_macro([a[0]], IDEAL, OFF)
    assert by.channels == [0]
    with pytest.raises(ValueError):
        run_macro(EventStream([1], [1024], [1]), IDEAL, OFF)
    with pytest.raises(ValueError):
        run_macro(stream, IDEAL, OFF, vbp_codes=[1, 1])


def test_routing_invariant_to_channel_subset():
    rec = synthesize(SynthesisSpec(noise_sigma=0.15, duration_s=1.0, channels=4, rng_seed=2))
    stream = encode_recording(rec, [0.1] * 4)
    mm = MismatchSpec(jump_cv=0.1, trip_cv=0.05, rng_seed=9)
    full = run_macro(stream, HramParams(), mm)
    one = run_macro(stream, HramParams(), mm, channels=[2])
    np.testing.assert_array_equal(full.detections[2], one.detections[0])


# calibration


def _spike_stimulus(template="pos_neg_pos"):
    w = builtin_templates(FS)[template]
    return build_stimuli(w, np.zeros(240), 0.1, FS)


def test_build_stimuli_examples():
    sp, nz = _spike_stimulus()
    assert len(sp) >= 10
    assert len(nz) == 0
    sp2, nz2 = _spike_stimulus()
    np.testing.assert_array_equal(sp, sp2)
    assert np.all((sp >= 1000) & (sp < 2100))
    with pytest.raises(ValueError):
        build_stimuli([], [0.0], 0.1, FS)


def test_noise_stimulus_has_no_startup_burst():
    seg = np.full(240, 5.0) + np.random.default_rng(0).normal(0, 0.01, 240)
    _, nz = build_stimuli([1.0], seg, 0.1, FS)
    assert len(nz) < 5


def test_calibration_fixes_low_gain_channel():
    # channel 55 draws a common gain deviation of about -30% at jump_cv=0.3
    mm = MismatchSpec(jump_cv=0.3, trip_cv=0.0, jump_shared=1.0, flip_prob_pos=0.0,
                      flip_prob_neg=0.0, rng_seed=0)
    g, _ = draw_mismatch(mm, 55, IDEAL)
    assert g == pytest.approx(np.full(8, 0.697), abs=0.005)
    sp, nz = _spike_stimulus()
    res = calibrate(sp, nz, [55], IDEAL, mm)
    code = int(res.codes[0])
    assert VbpTable()[code] > 1.0
    assert res.fn[0, code] < res.fn[0, 1]


def test_calibration_keeps_nominal_channel():
    sp, nz = _spike_stimulus()
    res = calibrate(sp, nz, [0, 1, 2], IDEAL, OFF)
    assert res.codes.tolist() == [1, 1, 1]
    assert res.fn[:, 1].tolist() == [0, 0, 0]
    assert list(res.rows())[0] == (0, 1, 0, 0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), cv=st.sampled_from([0.1, 0.3]))
def test_chosen_cost_never_exceeds_default(seed, cv):
    sp, _ = _spike_stimulus()
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 0.2, 240)
    _, nz = build_stimuli([1.0], x, 0.1, FS)
    mm = MismatchSpec(jump_cv=cv, trip_cv=0.05, rng_seed=seed)
    res = calibrate(sp, nz, range(4), HramParams(), mm, presentations=20)
    cost = res.cost
    for i, k in enumerate(res.codes):
        assert cost[i, k] <= cost[i, 1]
        assert cost[i, k] == cost[i].min()


def test_choose_code_tie_order():
    assert choose_code([0, 0, 0, 0]) == 1
    assert choose_code([0, 5, 0, 0]) == 2
    assert choose_code([0, 5, 5, 0]) == 0
    assert choose_code([4, 3, 9, 1]) == 3


def test_calibrate_rejects_missing_stimuli():
    with pytest.raises(ValueError):
        calibrate(None, [], [0])
    with pytest.raises(ValueError):
        calibrate([], [], [0])
    with pytest.raises(ValueError):
        calibrate([20_000], [], [0])


def test_onset_gain():
    sp, _ = _spike_stimulus()
    g = onset_gain(sp, IDEAL, 80)
    for code, expect in ((1, True), (2, False)):
        _, d = run_channel(sp, 0, IDEAL, OFF, code,
                           VbpTable((g * 1.5, g * 1.01, g * 0.99, g * 0.5)), n_bins=80)
        assert bool(len(d)) is expect
    assert onset_gain([], IDEAL, 80) == float("inf")
