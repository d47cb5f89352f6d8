"""Tests for TOA, Doppler, the Kalman filter and the range pipeline."""
import math

import numpy as np
import pytest
import scipy.fft as sfft

from echoloc.channel import (ChannelConfig, PathSet, apply_channel,
                             sound_speed_from_temperature)
from echoloc.errors import ArgumentError, NoSignalError
from echoloc.estimation import (DopplerResult, KalmanState,
                                RangePipelineConfig, ToaResult,
                                _compensated_toa, _search_toa,
                                _segment_offsets, cross_correlate,
                                estimate_doppler, estimate_toa,
                                kalman_update, run_range_pipeline)
from echoloc.signals import (DEFAULT_SAMPLE_RATE_HZ, SignalFrame,
                             make_hop_plan, random_bits, samples_per_bit,
                             synthesize_fhss)

C20 = sound_speed_from_temperature(20.0)
FS = DEFAULT_SAMPLE_RATE_HZ
BURST_RATE_HZ = 15.0
BURST_S = 64e-3  # 64 bits at 1 ms


def one_path(delay_samples: float) -> PathSet:
    return PathSet(np.array([delay_samples / FS]), np.array([1.0]),
                   np.array([0]))


def burst(seed: int, n_bits: int = 64, carrier_set=None):
    kw = {} if carrier_set is None else {"carrier_set": carrier_set}
    plan = make_hop_plan(n_bits, seed=seed + 1, **kw)
    return synthesize_fhss(random_bits(n_bits, seed=seed), plan), plan


def through_channel(ref, delay_samples: float, velocity_mps: float,
                    snr_db: float, seed: int = 0) -> SignalFrame:
    cfg = ChannelConfig(snr_db=snr_db, fading="none", seed=seed)
    return apply_channel(ref, one_path(delay_samples), velocity_mps, cfg, C20)


# --------------------------------------------------------------------------
# cross-correlation


class TestCrossCorrelate:
    def test_matches_direct_summation(self):
        rng = np.random.default_rng(0)
        rx = rng.standard_normal(400)
        ref = rng.standard_normal(150)
        got = cross_correlate(rx, ref)
        want = np.correlate(rx, ref, mode="valid")
        assert got.shape == want.shape == (251,)
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)

    def test_unit_reference_recovers_received(self):
        rx = np.array([0.0, 0.0, 1.0, 0.5, 0.0])
        np.testing.assert_allclose(cross_correlate(rx, np.array([1.0])), rx,
                                   atol=1e-12)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ArgumentError):
            cross_correlate(np.zeros((4, 4)), np.zeros(2))
        with pytest.raises(ArgumentError):
            cross_correlate(np.zeros(4), np.array([]))
        with pytest.raises(ArgumentError):
            cross_correlate(np.zeros(3), np.zeros(5))


# --------------------------------------------------------------------------
# time of arrival


class TestEstimateToa:
    def test_integer_delay_exact(self):
        ref, _ = burst(2)
        rx = through_channel(ref, 340, 0.0, math.inf)
        res = estimate_toa(rx, ref, C20)
        assert res.peak_sample == 340
        assert res.distance_m == pytest.approx(C20.value_mps * 340 / FS,
                                               rel=1e-12)

    def test_zero_delay(self):
        ref, _ = burst(4)
        rx = SignalFrame(np.concatenate([ref.samples, np.zeros(100)]), FS)
        res = estimate_toa(rx, ref, C20)
        assert res.peak_sample == 0
        assert res.distance_m == 0.0

    def test_distance_sample_identity(self):
        # distance * fs / c recovers the integer peak lag exactly
        ref, _ = burst(6)
        for delay in (1, 17, 999, 4242):
            rx = through_channel(ref, delay, 0.0, math.inf)
            res = estimate_toa(rx, ref, C20)
            assert res.peak_sample == delay
            back = res.distance_m * FS / C20.value_mps
            assert round(back) == delay
            assert back == pytest.approx(delay, abs=1e-6)

    def test_all_zero_frame_raises(self):
        ref, _ = burst(8)
        rx = SignalFrame(np.zeros(ref.samples.size + 10), FS)
        with pytest.raises(NoSignalError):
            estimate_toa(rx, ref, C20)

    def test_short_received_raises(self):
        ref, _ = burst(10)
        rx = SignalFrame(np.ones(ref.samples.size - 1), FS)
        with pytest.raises(ArgumentError):
            estimate_toa(rx, ref, C20)

    def test_rate_mismatch_raises(self):
        ref, _ = burst(12)
        rx = SignalFrame(np.ones(ref.samples.size + 10), FS * 2)
        with pytest.raises(ArgumentError):
            estimate_toa(rx, ref, C20)

    def test_echo_halves_quality(self):
        # a 0.5-gain echo 5000 samples behind the arrival caps the quality
        # ratio near 2
        ref, _ = burst(14)
        paths = PathSet(np.array([2000 / FS, 7000 / FS]),
                        np.array([1.0, 0.5]), np.array([0, 1]))
        cfg = ChannelConfig(snr_db=math.inf, fading="none", seed=0)
        rx = apply_channel(ref, paths, 0.0, cfg, C20)
        res = estimate_toa(rx, ref, C20)
        assert res.peak_sample == 2000
        assert 1.8 <= res.quality <= 2.3

    def test_quality_at_least_one(self):
        for seed in range(5):
            ref, _ = burst(20 + seed)
            rx = through_channel(ref, 500, 0.0, 0.0, seed=seed)
            assert estimate_toa(rx, ref, C20).quality >= 1.0

    def test_200_noisy_trials_hit_exact_sample(self):
        hits = 0
        for i in range(200):
            ref, _ = burst(1000 + 2 * i)
            rx = through_channel(ref, 1000, 0.0, 10.0, seed=3000 + i)
            hits += estimate_toa(rx, ref, C20).peak_sample == 1000
        assert hits >= 196

    def test_result_validation(self):
        with pytest.raises(ArgumentError):
            ToaResult(-1, 1.0, 1.0, 2.0)
        with pytest.raises(ArgumentError):
            ToaResult(0, 1.0, -0.1, 2.0)
        with pytest.raises(ArgumentError):
            ToaResult(0, 1.0, 1.0, 0.5)
        assert ToaResult(0, 1.0, 1.0, math.inf).quality == math.inf


# --------------------------------------------------------------------------
# segmented velocity-compensated correlation


class TestSegmentedSearch:
    def test_offsets_zero_when_still(self):
        assert not np.any(_segment_offsets(21760, 16, 0.0, C20))

    def test_offsets_antisymmetric(self):
        a = _segment_offsets(21760, 16, 0.8, C20)
        b = _segment_offsets(21760, 16, -0.8, C20)
        np.testing.assert_array_equal(a, -b)

    def test_offsets_grow_along_burst_when_closing(self):
        # a closing burst is compressed: late segments arrive early, so
        # their correlations are pushed to later lags to stack at center
        offs = _segment_offsets(21760, 16, 5.0, C20)
        assert np.all(np.diff(offs) >= 0)
        assert offs[0] < 0 < offs[-1]

    def test_compensated_matches_rigid_when_still(self):
        ref, _ = burst(30)
        rx = through_channel(ref, 800, 0.0, 20.0, seed=5)
        rigid = estimate_toa(rx, ref, C20)
        comp = _compensated_toa(rx, ref, C20, 0.0, 800, 300)
        assert comp.peak_sample == rigid.peak_sample
        assert comp.peak_value == pytest.approx(rigid.peak_value, rel=1e-6)

    def test_search_matches_rigid_when_still(self):
        ref, _ = burst(32)
        rx = through_channel(ref, 1200, 0.0, 20.0, seed=6)
        rigid = estimate_toa(rx, ref, C20)
        res, v_hat = _search_toa(rx, ref, C20, 0.75, 0.05)
        assert v_hat == 0.0
        assert res.peak_sample == rigid.peak_sample

    @pytest.mark.parametrize("v", [0.3, 0.5, -0.6])
    def test_search_recovers_motion(self, v):
        # the peak of the compensated stack reads in burst-center lags:
        # d0 + mid * (1/scale - 1) for a burst delayed d0 samples
        scale = 1.0 + v / C20.value_mps
        for trial in range(3):
            ref, _ = burst(40 + 10 * trial)
            rx = through_channel(ref, 2000, v, 20.0, seed=7 + trial)
            res, v_hat = _search_toa(rx, ref, C20, 0.75, 0.05)
            assert v_hat == pytest.approx(v, abs=1e-9)
            mid = (ref.samples.size - 1) / 2.0
            expected = 2000 + mid * (1.0 / scale - 1.0)
            assert abs(res.peak_sample - expected) <= 2.0

    def test_search_never_weaker_than_rigid(self):
        # the v = 0 candidate reproduces the rigid correlation, so the
        # joint search can only return a stronger combined peak
        ref, _ = burst(36)
        rx = through_channel(ref, 2000, 0.5, 20.0, seed=9)
        rigid = estimate_toa(rx, ref, C20)
        res, _ = _search_toa(rx, ref, C20, 0.75, 0.05)
        assert res.peak_value >= rigid.peak_value - 1e-6

    def test_window_outside_frame_raises(self):
        ref, _ = burst(38)
        rx = through_channel(ref, 300, 0.0, 20.0, seed=10)
        with pytest.raises(NoSignalError):
            _compensated_toa(rx, ref, C20, 0.0, rx.samples.size, 50)


# --------------------------------------------------------------------------
# Doppler


def doppler_full_band(frame, plan, c, bit_duration_s=1e-3):
    """Reference implementation scanning full per-bit spectra (no band
    union slicing); the library must agree to float rounding."""
    n_spb = samples_per_bit(bit_duration_s, frame.sample_rate_hz)
    n_bits = min(len(plan), frame.samples.size // n_spb)
    fs = frame.sample_rate_hz
    carriers = np.asarray(plan.carrier_hz_per_bit[:n_bits])
    windows = frame.samples[:n_bits * n_spb].reshape(n_bits, n_spb)
    windows = windows * np.hanning(n_spb).astype(frame.samples.dtype)
    nfft = 1 << max(1, (3 * n_spb - 1)).bit_length()
    spec = sfft.rfft(windows, nfft, axis=1)
    df = fs / nfft
    n_bins = spec.shape[1]
    mag = np.abs(spec)
    half = plan.sub_band_hz / 2.0
    tiny = np.finfo(np.float64).tiny
    shifts, vels = [], []
    for j in range(n_bits):
        lo = int(np.clip(math.ceil((carriers[j] - half) / df), 0, n_bins - 1))
        hi = int(np.clip(math.floor((carriers[j] + half) / df) + 1, 1, n_bins))
        k = lo + int(np.argmax(mag[j, lo:hi]))
        delta = 0.0
        if 0 < k < n_bins - 1:
            a = math.log(mag[j, k - 1] + tiny)
            b = math.log(mag[j, k] + tiny)
            g = math.log(mag[j, k + 1] + tiny)
            den = a - 2.0 * b + g
            if den < 0:
                delta = min(1.0, max(-1.0, 0.5 * (a - g) / den))
        f_peak = (k + delta) * df
        shifts.append(f_peak - carriers[j])
        vels.append(c.value_mps * shifts[-1] / carriers[j])
    return float(np.mean(shifts)), float(np.mean(vels))


class TestEstimateDoppler:
    def test_still_burst_reads_near_zero(self):
        ref, plan = burst(50)
        res = estimate_doppler(ref, plan, C20)
        assert abs(res.velocity_mps) < 0.01
        assert abs(res.shift_hz) < 1.0

    def test_closing_single_carrier(self):
        ref, plan = burst(52, n_bits=16, carrier_set=[40000.0])
        rx = through_channel(ref, 700, 3.4, math.inf)
        sliced = SignalFrame(rx.samples[700:700 + ref.samples.size], FS)
        res = estimate_doppler(sliced, plan, C20)
        assert res.velocity_mps == pytest.approx(3.4, abs=0.05)
        assert res.shift_hz == pytest.approx(40000.0 * 3.4 / C20.value_mps,
                                             abs=2.0)

    def test_receding_single_carrier(self):
        ref, plan = burst(54, n_bits=16, carrier_set=[40000.0])
        rx = through_channel(ref, 700, -1.7, math.inf)
        sliced = SignalFrame(rx.samples[700:700 + ref.samples.size], FS)
        res = estimate_doppler(sliced, plan, C20)
        assert res.velocity_mps == pytest.approx(-1.7, abs=0.05)
        assert res.shift_hz < 0

    def test_single_carrier_shift_velocity_consistency(self):
        ref, plan = burst(56, n_bits=16, carrier_set=[40000.0])
        rx = through_channel(ref, 700, 2.0, math.inf)
        sliced = SignalFrame(rx.samples[700:700 + ref.samples.size], FS)
        res = estimate_doppler(sliced, plan, C20)
        assert res.velocity_mps == pytest.approx(
            C20.value_mps * res.shift_hz / 40000.0, rel=1e-12)

    @pytest.mark.parametrize("v", [-10.0, -5.0, -1.0, 1.0, 5.0, 10.0])
    def test_speed_sweep_short_frames(self, v):
        ref, plan = burst(58, n_bits=8, carrier_set=[40000.0])
        rx = through_channel(ref, 500, v, math.inf)
        sliced = SignalFrame(rx.samples[500:500 + ref.samples.size], FS)
        res = estimate_doppler(sliced, plan, C20)
        assert res.velocity_mps == pytest.approx(v, abs=0.05)

    def test_hopping_burst_at_20db(self):
        for t in range(5):
            ref, plan = burst(60 + 2 * t)
            rx = through_channel(ref, 900, 1.0, 20.0, seed=70 + t)
            sliced = SignalFrame(rx.samples[900:900 + ref.samples.size], FS)
            res = estimate_doppler(sliced, plan, C20)
            assert res.velocity_mps == pytest.approx(1.0, abs=0.15)

    def test_frame_shorter_than_one_bit_raises(self):
        ref, plan = burst(70)
        short = SignalFrame(ref.samples[:339], FS)
        with pytest.raises(ArgumentError):
            estimate_doppler(short, plan, C20)

    def test_matches_full_band_reference(self):
        for t in range(5):
            ref, plan = burst(80 + 2 * t)
            rx = through_channel(ref, 600, 0.7, 15.0, seed=90 + t)
            sliced = SignalFrame(rx.samples[600:600 + ref.samples.size], FS)
            got = estimate_doppler(sliced, plan, C20)
            shift, vel = doppler_full_band(sliced, plan, C20)
            assert got.shift_hz == pytest.approx(shift, abs=1e-9)
            assert got.velocity_mps == pytest.approx(vel, abs=1e-12)


# --------------------------------------------------------------------------
# Kalman filter


class TestKalman:
    def test_hand_worked_step(self):
        # pred = 1.0 + 5 * 0.02 = 1.1 equals the measurement, and with
        # p = q = r = 1e-4 the gain is 2/3: p_new = r * 2/3
        state = KalmanState(1.00, 1e-4, 0.01, 0.01)
        new = kalman_update(state, 1.10, 5.0, 0.02)
        assert new.d_hat_m == pytest.approx(1.1, rel=1e-15)
        assert new.p_hat == pytest.approx(6.6666666666666667e-5, rel=1e-12)

    def test_hand_worked_innovation(self):
        # same state, measurement 0.1 above the prediction: the posterior
        # moves 2/3 of the innovation
        state = KalmanState(1.00, 1e-4, 0.01, 0.01)
        new = kalman_update(state, 1.20, 5.0, 0.02)
        assert new.d_hat_m == pytest.approx(1.1 + 0.1 * 2.0 / 3.0, rel=1e-12)

    def test_dead_reckoning_limit(self):
        state = KalmanState(2.0, 1e-4, 0.01, 1e9)
        new = kalman_update(state, 99.0, -0.5, 0.1)
        assert new.d_hat_m == pytest.approx(2.0 - 0.05, abs=1e-12)

    def test_trust_toa_limit(self):
        state = KalmanState(2.0, 1e-4, 0.01, 1e-9)
        new = kalman_update(state, 99.0, -0.5, 0.1)
        assert new.d_hat_m == pytest.approx(99.0, abs=1e-12)
        assert new.p_hat <= 1e-18

    def test_fuzz_gain_and_variance_bounds(self):
        rng = np.random.default_rng(123)
        for _ in range(10_000):
            d = rng.uniform(0.0, 50.0)
            p = rng.uniform(0.0, 1.0)
            q = rng.uniform(1e-9, 1.0)
            r = rng.uniform(1e-9, 1.0)
            toa = rng.uniform(0.0, 50.0)
            v = rng.uniform(-5.0, 5.0)
            dt = rng.uniform(0.0, 1.0)
            new = kalman_update(KalmanState(d, p, q, r), toa, v, dt)
            pred = d + v * dt
            pq = p + q * q
            if toa != pred:
                gain = (new.d_hat_m - pred) / (toa - pred)
                assert 0.0 < gain < 1.0
            assert 0.0 < new.p_hat <= r * r
            assert new.p_hat <= pq + 1e-18

    def test_variance_contracts_from_r_squared(self):
        # seeded at p = r^2 (one measurement of confidence), repeated
        # updates shrink the variance monotonically toward the fixed point
        state = KalmanState(3.0, 0.01 ** 2, 0.001, 0.01)
        last = state.p_hat
        for _ in range(20):
            state = kalman_update(state, 3.0, 0.0, 1.0 / BURST_RATE_HZ)
            assert state.p_hat < last
            last = state.p_hat

    def test_rejects_bad_inputs(self):
        good = KalmanState(1.0, 1e-4, 0.01, 0.01)
        with pytest.raises(ArgumentError):
            kalman_update(good, -1.0, 0.0, 0.1)
        with pytest.raises(ArgumentError):
            kalman_update(good, math.nan, 0.0, 0.1)
        with pytest.raises(ArgumentError):
            kalman_update(good, 1.0, 0.0, -0.1)
        with pytest.raises(ArgumentError):
            kalman_update(good, 1.0, 0.0, math.inf)

    def test_state_validation(self):
        with pytest.raises(ArgumentError):
            KalmanState(math.nan, 1e-4, 0.01, 0.01)
        with pytest.raises(ArgumentError):
            KalmanState(1.0, -1e-4, 0.01, 0.01)
        with pytest.raises(ArgumentError):
            KalmanState(1.0, 1e-4, -0.01, 0.01)


# --------------------------------------------------------------------------
# range pipeline


def make_track_inputs(dist_fn, vel_fn, n_bursts, snr_db, seed0):
    times = np.arange(n_bursts) / BURST_RATE_HZ
    frames, refs, plans = [], [], []
    for i, t in enumerate(times):
        ref, plan = burst(seed0 + 7 * i)
        d_m = dist_fn(t)
        rx = through_channel(ref, d_m / C20.value_mps * FS, vel_fn(t),
                             snr_db, seed=seed0 + 7 * i + 3)
        frames.append(rx)
        refs.append(ref)
        plans.append(plan)
    return frames, refs, plans, times


@pytest.fixture(scope="module")
def moving_track():
    """50 bursts at 20 dB closing at 0.4 m/s from 3.5 m."""
    dist = lambda t: 3.5 - 0.4 * t
    frames, refs, plans, times = make_track_inputs(
        dist, lambda t: 0.4, 50, 20.0, seed0=1000)
    truth_mid = np.array([dist(t + BURST_S / 2) for t in times])
    return frames, refs, plans, times, truth_mid


def pipeline_config(times, **kw):
    return RangePipelineConfig(c=C20, burst_times_s=tuple(times), **kw)


class TestRangePipeline:
    def test_stationary_noiseless_within_one_sample(self, ):
        frames, refs, plans, times = make_track_inputs(
            lambda t: 2.5, lambda t: 0.0, 30, math.inf, seed0=2000)
        track = run_range_pipeline(frames, refs, plans,
                                   pipeline_config(times))
        quantum = C20.value_mps / FS
        assert np.max(np.abs(track.raw_m - 2.5)) <= quantum
        assert np.max(np.abs(track.fused_m - 2.5)) <= quantum

    def test_fused_beats_raw_under_motion(self, moving_track):
        frames, refs, plans, times, truth = moving_track
        track = run_range_pipeline(frames, refs, plans,
                                   pipeline_config(times))
        rmse_fused = np.sqrt(np.mean((track.fused_m - truth) ** 2))
        rmse_raw = np.sqrt(np.mean((track.raw_m - truth) ** 2))
        assert rmse_fused < rmse_raw
        assert rmse_fused < 1e-3

    def test_tiny_r_collapses_to_raw(self, moving_track):
        frames, refs, plans, times, _ = moving_track
        track = run_range_pipeline(frames, refs, plans,
                                   pipeline_config(times, r_std_m=1e-9))
        np.testing.assert_allclose(track.fused_m, track.raw_m, atol=1e-9)

    def test_huge_r_dead_reckons(self, moving_track):
        frames, refs, plans, times, truth = moving_track
        track = run_range_pipeline(frames, refs, plans,
                                   pipeline_config(times, r_std_m=1e6))
        # ignores the per-burst TOA after initialization yet stays on the
        # track because the Doppler speed is accurate
        assert np.max(np.abs(track.fused_m - truth)) < 5e-3
        assert np.max(np.abs(track.fused_m - track.raw_m)) > 1e-6

    def test_gap_yields_nan_then_recovers(self):
        frames, refs, plans, times = make_track_inputs(
            lambda t: 2.0, lambda t: 0.0, 20, 20.0, seed0=3000)
        frames[10] = None
        track = run_range_pipeline(frames, refs, plans,
                                   pipeline_config(times))
        assert math.isnan(track.fused_m[10])
        assert track.toa[10] is None
        assert track.doppler[10] is None
        assert math.isnan(track.raw_m[10])
        quantum = C20.value_mps / FS
        assert np.max(np.abs(track.fused_m[11:] - 2.0)) <= quantum

    def test_jump_beyond_gate_triggers_research(self):
        # a 1.5 m teleport exceeds the 0.6 m warm gate; the quality floor
        # rejects the gated measurement and the full search reacquires on
        # the very next burst
        dist = lambda t: 2.0 if t < 25 / BURST_RATE_HZ - 1e-9 else 3.5
        frames, refs, plans, times = make_track_inputs(
            dist, lambda t: 0.0, 50, 20.0, seed0=4000)
        track = run_range_pipeline(frames, refs, plans,
                                   pipeline_config(times))
        assert abs(track.raw_m[24] - 2.0) < 5e-3
        assert abs(track.raw_m[25] - 3.5) < 5e-3
        assert abs(track.fused_m[-1] - 3.5) < 2e-3

    def test_assist_off_uses_rigid_correlation(self):
        frames, refs, plans, times = make_track_inputs(
            lambda t: 2.5, lambda t: 0.0, 5, math.inf, seed0=5000)
        track = run_range_pipeline(frames, refs, plans,
                                   pipeline_config(times, assist=False))
        for frame, ref, toa in zip(frames, refs, track.toa):
            rigid = estimate_toa(frame, ref, C20)
            assert toa.peak_sample == rigid.peak_sample

    def test_track_metadata(self, moving_track):
        frames, refs, plans, times, _ = moving_track
        track = run_range_pipeline(frames, refs, plans,
                                   pipeline_config(times, beacon_id=3))
        assert track.beacon_id == 3
        assert track.t_s.size == len(frames)
        raw = track.raw_m
        for r, t in zip(raw, track.toa):
            assert r == t.distance_m

    def test_rejects_bad_inputs(self, moving_track):
        frames, refs, plans, times, _ = moving_track
        with pytest.raises(ArgumentError):
            run_range_pipeline(frames[:-1], refs, plans,
                               pipeline_config(times))
        with pytest.raises(ArgumentError):
            run_range_pipeline([], [], [], pipeline_config(np.array([])))
        bad_times = np.array(times)
        bad_times[5] = bad_times[4]
        with pytest.raises(ArgumentError):
            run_range_pipeline(frames, refs, plans,
                               pipeline_config(bad_times))
