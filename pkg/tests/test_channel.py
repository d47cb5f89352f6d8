import math

import numpy as np
import pytest
from scipy import ndimage

from echoloc.channel import (FADING_NONE, FADING_RAYLEIGH, ChannelConfig,
                             PathSet, SoundSpeed, _prefiltered,
                             _resample_cubic, apply_channel, beam_visible,
                             calibrate_sound_speed, image_method_paths,
                             sound_speed_from_temperature)
from echoloc.errors import (ArgumentError, ConfigurationError, DomainError,
                            NoSignalError)
from echoloc.estimation import estimate_toa
from echoloc.signals import (BitSequence, HopPlan, SignalFrame, make_hop_plan,
                             random_bits, synthesize_fhss)

from conftest import BEACONS, ROOM

FS = 340000.0


def single_carrier_burst(n_bits=8, carrier_hz=40000.0, seed=0):
    bits = random_bits(n_bits, seed=seed)
    plan = HopPlan([carrier_hz] * n_bits, carrier_set=(carrier_hz,))
    return synthesize_fhss(bits, plan), plan


def quiet_config(**kw):
    kw.setdefault("snr_db", np.inf)
    kw.setdefault("max_reflection_order", 0)
    kw.setdefault("fading", FADING_NONE)
    kw.setdefault("seed", 0)
    return ChannelConfig(**kw)


def padded_peak_hz(samples, fs, pad=16):
    n = samples.size * pad
    spec = np.abs(np.fft.rfft(samples, n))
    return np.fft.rfftfreq(n, 1.0 / fs)[int(np.argmax(spec))]


# ---------------------------------------------------------------- sound speed

def test_sound_speed_at_zero_is_reference():
    assert sound_speed_from_temperature(0.0).value_mps == 331.3


def test_sound_speed_at_twenty():
    # 331.3 * sqrt(1 + 20/273.15), evaluated independently at high precision.
    assert sound_speed_from_temperature(20.0).value_mps == pytest.approx(
        343.21462268256793, abs=1e-12)


def test_sound_speed_below_absolute_zero_rejected():
    with pytest.raises(DomainError):
        sound_speed_from_temperature(-273.15)
    with pytest.raises(DomainError):
        sound_speed_from_temperature(-300.0)


def test_sound_speed_range_over_operating_temperatures():
    for t in (-20.0, -5.0, 0.0, 10.0, 25.0, 50.0):
        assert 300.0 < sound_speed_from_temperature(t).value_mps < 400.0


def test_sound_speed_source_tag():
    assert sound_speed_from_temperature(20.0).source == "temperature_formula"
    with pytest.raises(ArgumentError):
        SoundSpeed(343.0, source="guesswork")


def test_calibration_division():
    cal = calibrate_sound_speed(3.40, 0.01)
    assert cal.value_mps == pytest.approx(340.0, abs=1e-12)
    assert cal.source == "pilot_calibration"
    assert calibrate_sound_speed(1.0, 1.0 / 331.3).value_mps == pytest.approx(
        331.3, abs=1e-9)


def test_calibration_rejects_nonpositive():
    with pytest.raises(ArgumentError):
        calibrate_sound_speed(0.0, 0.01)
    with pytest.raises(ArgumentError):
        calibrate_sound_speed(2.0, -1e-3)


def test_calibration_round_trip_through_ranging(c20):
    # Simulate a tone over a known 2 m path, measure its TOF with the
    # correlator, and calibrate.  The TOA quantum (one sample) propagates
    # to at most ~c^2/(d*fs) of sound-speed error.
    burst, _ = single_carrier_burst(n_bits=16)
    d = 2.0
    paths = PathSet([d / c20.value_mps], [1.0], [0])
    rx = apply_channel(burst, paths, 0.0, quiet_config(), c20)
    toa = estimate_toa(rx, burst, c20)
    cal = calibrate_sound_speed(d, toa.peak_sample / FS)
    tol = c20.value_mps ** 2 / (d * FS)
    assert abs(cal.value_mps - c20.value_mps) <= tol * 1.01


# ---------------------------------------------------------------- path sets

def test_path_set_validation():
    with pytest.raises(ArgumentError):
        PathSet([0.0], [1.0], [0])                   # nonpositive delay
    with pytest.raises(ArgumentError):
        PathSet([2e-3, 1e-3], [1.0, 0.5], [0, 1])    # unsorted
    with pytest.raises(ArgumentError):
        PathSet([1e-3], [1.5], [0])                  # gain above 1
    with pytest.raises(ArgumentError):
        PathSet([1e-3, 2e-3], [0.5, 0.9], [0, 1])    # echo louder than direct
    with pytest.raises(ArgumentError):
        PathSet([1e-3, 2e-3], [1.0], [0, 1])         # ragged


def test_path_set_accessors():
    ps = PathSet([1e-3, 2e-3, 4e-3], [1.0, 0.5, 0.25], [0, 1, 1])
    assert ps.n_paths == 3
    assert ps.direct_delay_s == 1e-3
    assert ps.delay_spread_s == pytest.approx(3e-3)


def test_channel_config_validation():
    with pytest.raises(ConfigurationError):
        ChannelConfig(max_reflection_order=3)
    with pytest.raises(ConfigurationError):
        ChannelConfig(snr_db=float("nan"))
    with pytest.raises(ConfigurationError):
        ChannelConfig(wall_reflection_loss=0.0)
    with pytest.raises(ConfigurationError):
        ChannelConfig(fading="rician")
    assert ChannelConfig().fading == FADING_RAYLEIGH


# ---------------------------------------------------------------- image method

def test_image_method_order_zero_single_path(c20):
    tx, rx = (1.0, 2.0, 1.2), (3.5, 4.0, 2.1)
    ps = image_method_paths(tx, rx, ROOM, max_order=0, c=c20)
    assert ps.n_paths == 1
    assert ps.delays_s[0] == pytest.approx(math.dist(tx, rx) / c20.value_mps,
                                           rel=1e-15)
    assert ps.gains[0] == 1.0
    assert ps.bounces[0] == 0


def reflect_images(src, room):
    """First-order mirror images of a source in a box, by hand."""
    out = []
    for axis in range(3):
        lo = list(src); lo[axis] = -src[axis]
        hi = list(src); hi[axis] = 2 * room[axis] - src[axis]
        out += [tuple(lo), tuple(hi)]
    return out


def test_image_method_first_order_against_hand_reflections(c20):
    tx, rx = (1.0, 2.0, 1.2), (3.5, 4.0, 2.1)
    ps = image_method_paths(tx, rx, ROOM, max_order=1,
                            wall_reflection_loss=0.5, c=c20)
    assert ps.n_paths == 7

    d_direct = math.dist(tx, rx)
    expect = sorted([d_direct] + [math.dist(img, rx)
                                  for img in reflect_images(tx, ROOM)])
    got = ps.delays_s * c20.value_mps
    np.testing.assert_allclose(got, expect, rtol=1e-12)

    # Spot-check the two shortest paths against frozen independents.
    assert got[0] == pytest.approx(3.3256578296631781, abs=1e-12)
    assert got[1] == pytest.approx(4.1880783182743849, abs=1e-12)
    assert ps.gains[1] == pytest.approx(0.39703863883728061, abs=1e-12)

    # Gain law: direct gain 1; echo gain = loss^bounces * d_direct/d_path.
    assert ps.gains[0] == 1.0
    np.testing.assert_allclose(ps.gains[1:], 0.5 * d_direct / got[1:],
                               rtol=1e-12)
    assert np.all(np.diff(ps.delays_s) >= 0)
    assert list(ps.bounces) == [0, 1, 1, 1, 1, 1, 1]


def test_image_method_path_counts(c20):
    tx, rx = (1.0, 2.0, 1.2), (3.5, 4.0, 2.1)
    for order, count in ((0, 1), (1, 7), (2, 25)):
        ps = image_method_paths(tx, rx, ROOM, max_order=order, c=c20)
        assert ps.n_paths == count


def test_image_method_delay_spread_spans_many_hops(c20):
    # For a 5x5x3 room the first-order echoes arrive up to several
    # milliseconds after the direct path, i.e. across many 1 ms hops.
    # Downstream code must not assume echoes die out within a hop.
    tx = (2.4995, 2.5, 1.5)
    rx = (2.5005, 2.5, 1.5)
    ps = image_method_paths(tx, rx, ROOM, max_order=1, c=c20)
    assert ps.delay_spread_s == pytest.approx(
        (max(ps.delays_s) - min(ps.delays_s)))
    assert ps.delay_spread_s > 0.010  # ~14.6 ms here; far beyond one hop


def test_image_method_argument_errors(c20):
    inside = (2.5, 2.5, 1.5)
    with pytest.raises(ArgumentError):
        image_method_paths((6.0, 1.0, 1.0), inside, ROOM, c=c20)
    with pytest.raises(ArgumentError):
        image_method_paths((5.0, 2.5, 1.5), inside, ROOM, c=c20)  # on a wall
    with pytest.raises(ArgumentError):
        image_method_paths(inside, inside, ROOM, c=c20)  # coincident
    with pytest.raises(ArgumentError):
        image_method_paths(inside, (1.0, 1.0, 1.0), ROOM, max_order=3, c=c20)
    with pytest.raises(ArgumentError):
        image_method_paths(inside, (1.0, 1.0, 1.0), (5.0, -5.0, 3.0), c=c20)
    with pytest.raises(ArgumentError):
        image_method_paths(inside, (1.0, 1.0), ROOM, c=c20)


# ---------------------------------------------------------------- resampler

def test_resample_matches_scipy_in_the_interior():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(4000)
    coords = np.linspace(5.0, x.size - 6.0, 7777) + rng.uniform(
        -0.45, 0.45, 7777)
    ours = _resample_cubic(_prefiltered(x), coords, x.size)
    ref = ndimage.map_coordinates(x, coords[None].copy(), order=3,
                                  mode="constant", prefilter=True)
    assert np.max(np.abs(ours - ref)) < 1e-5


def test_resample_is_zero_outside_support():
    x = np.ones(100)
    coords = np.array([-50.0, -2.5, -2.0, 101.0, 101.5, 400.0])
    out = _resample_cubic(_prefiltered(x), coords, x.size)
    np.testing.assert_array_equal(out, 0.0)


# ---------------------------------------------------------------- channel

def test_integer_delay_is_exact_shift(c20):
    burst, _ = single_carrier_burst()
    delay = 100 / FS
    rx = apply_channel(burst, PathSet([delay], [1.0], [0]), 0.0,
                       quiet_config(), c20)
    n = burst.samples.size
    np.testing.assert_array_equal(rx.samples[100:100 + n], burst.samples)
    np.testing.assert_array_equal(rx.samples[:100], 0.0)


def test_fractional_delay_is_interpolated_not_rounded(c20):
    # A half-sample delay of a sine must track the analytically shifted
    # waveform well below one sample of error, away from the onset/decay
    # transients of the interpolation kernel.
    burst, _ = single_carrier_burst()
    delay_samples = 100.5
    tau = delay_samples / FS
    rx = apply_channel(burst, PathSet([tau], [1.0], [0]), 0.0,
                       quiet_config(), c20)
    n = burst.samples.size
    t = np.arange(rx.samples.size) / FS
    bits = np.repeat(np.asarray(random_bits(8, seed=0).bits, float), 340)
    analytic = np.zeros_like(t)
    live = (t >= tau) & (t < tau + n / FS)
    idx = np.clip(((t[live] - tau) * FS).astype(int), 0, n - 1)
    analytic[live] = bits[idx] * np.sin(2 * np.pi * 40000.0 * (t[live] - tau))
    mask = np.ones(rx.samples.size, bool)
    lo = int(delay_samples)
    mask[lo - 4:lo + 5] = False
    mask[lo + n - 4:lo + n + 5] = False
    # bit boundaries also carry one-sample transients from the bit flips
    for j in range(1, 8):
        b = lo + j * 340
        mask[b - 4:b + 5] = False
    assert np.max(np.abs(rx.samples - analytic)[mask]) < 5e-3


def test_doppler_scaling_moves_the_carrier(c20):
    burst, _ = single_carrier_burst(n_bits=1, seed=1)
    delay = 64 / FS
    f0 = padded_peak_hz(burst.samples, FS)

    def peak_for(v):
        rx = apply_channel(burst, PathSet([delay], [1.0], [0]), v,
                           quiet_config(), SoundSpeed(340.0))
        lo = 64 + 4
        return padded_peak_hz(rx.samples[lo:lo + 300], FS)

    bin_hz = FS / (300 * 16)
    # closing at 3.4 m/s on 340 m/s scales 40 kHz to 40.4 kHz
    assert abs(peak_for(3.4) - 40400.0) < 2 * bin_hz + abs(f0 - 40000.0)
    assert peak_for(1.0) > f0          # closing raises
    assert peak_for(-1.0) < f0         # receding lowers
    assert abs(peak_for(0.0) - f0) < bin_hz


def test_awgn_hits_the_requested_snr(c20):
    # Periodogram oracle: noise floor from an out-of-band region, signal
    # power from the carrier band, target 0 dB within +-1 dB.
    bits = random_bits(64, seed=0)
    plan = HopPlan([40000.0] * 64, carrier_set=(40000.0,))
    burst = synthesize_fhss(bits, plan)
    for seed in (0, 1, 2):
        cfg = quiet_config(snr_db=0.0, seed=seed)
        rx = apply_channel(burst, PathSet([500 / FS], [1.0], [0]), 0.0,
                           cfg, c20)
        x = rx.samples.astype(np.float64)
        psd = np.abs(np.fft.rfft(x)) ** 2 / x.size
        f = np.fft.rfftfreq(x.size, 1 / FS)
        noise_psd = np.median(psd[(f > 90000) & (f < 160000)]) / np.log(2)
        p_noise = noise_psd * psd.size
        sig_band = np.abs(f - 40000.0) < 5000.0
        p_sig = psd[sig_band].sum() - noise_psd * np.count_nonzero(sig_band)
        snr_est_db = 10 * np.log10(p_sig / p_noise)
        assert abs(snr_est_db) < 1.0


def test_multipath_does_not_lose_energy(c20):
    burst, _ = single_carrier_burst(n_bits=16, seed=2)
    rng = np.random.default_rng(7)
    for _ in range(10):
        tx = tuple(rng.uniform(0.5, d - 0.5) for d in ROOM)
        rx_pos = tuple(rng.uniform(0.5, d - 0.5) for d in ROOM)
        if math.dist(tx, rx_pos) < 0.1:
            continue
        direct = image_method_paths(tx, rx_pos, ROOM, max_order=0, c=c20)
        echoed = image_method_paths(tx, rx_pos, ROOM, max_order=1, c=c20)
        a = apply_channel(burst, direct, 0.0, quiet_config(), c20)
        b = apply_channel(burst, echoed, 0.0, quiet_config(), c20)
        assert np.sum(b.samples.astype(np.float64) ** 2) >= \
            np.sum(a.samples.astype(np.float64) ** 2)


def test_channel_determinism_and_seed_sensitivity(c20):
    burst, _ = single_carrier_burst()
    paths = PathSet([1e-3, 2e-3], [1.0, 0.4], [0, 1])
    cfg = ChannelConfig(snr_db=10.0, fading=FADING_RAYLEIGH, seed=11)
    a = apply_channel(burst, paths, 0.5, cfg, c20)
    b = apply_channel(burst, paths, 0.5, cfg, c20)
    np.testing.assert_array_equal(a.samples, b.samples)
    other = apply_channel(burst, paths, 0.5,
                          ChannelConfig(snr_db=10.0, seed=12), c20)
    assert not np.array_equal(a.samples, other.samples)


def test_rayleigh_fading_leaves_direct_path_alone(c20):
    burst, _ = single_carrier_burst()
    paths = PathSet([1e-3, 4e-3], [1.0, 0.4], [0, 1])
    faded = apply_channel(burst, paths, 0.0,
                          quiet_config(fading=FADING_RAYLEIGH, seed=3), c20)
    plain = apply_channel(burst, paths, 0.0, quiet_config(seed=3), c20)
    # before the echo arrives the two outputs are the same direct signal
    first_echo = int(4e-3 * FS)
    np.testing.assert_array_equal(faded.samples[:first_echo],
                                  plain.samples[:first_echo])
    assert not np.array_equal(faded.samples, plain.samples)


def test_velocity_beyond_tenth_of_c_rejected(c20):
    burst, _ = single_carrier_burst(n_bits=1)
    paths = PathSet([1e-3], [1.0], [0])
    with pytest.raises(ArgumentError):
        apply_channel(burst, paths, 35.0, quiet_config(), c20)


# ---------------------------------------------------------------- beam cone

def test_beam_visibility_basics():
    tx = (2.5, 2.5, 1.5)
    assert beam_visible(tx, (1.0, 0.0, 0.0), (4.0, 2.5, 1.5))
    assert not beam_visible(tx, (1.0, 0.0, 0.0), (1.0, 2.5, 1.5))
    # exactly on the cone edge counts as visible
    assert beam_visible(tx, (1.0, 0.0, 0.0), (3.5, 3.5, 1.5),
                        half_angle_deg=45.0)
    assert not beam_visible(tx, (1.0, 0.0, 0.0), (3.5, 3.51, 1.5),
                            half_angle_deg=45.0)


def test_beam_visibility_argument_errors():
    with pytest.raises(ArgumentError):
        beam_visible((0, 0, 0), (0.0, 0.0, 0.0), (1, 1, 1))
    with pytest.raises(ArgumentError):
        beam_visible((0, 0, 0), (1.0, 0.0, 0.0), (1, 1, 1), half_angle_deg=0.0)


def test_clover_covers_all_beacons_from_room_center():
    # Four horizontal beams at 60 degrees, drone at room center: every
    # default beacon falls inside at least one cone.  Oracle: direct angle
    # arithmetic, no library geometry.
    tx = np.array([2.5, 2.5, 1.5])
    facings = [np.array(f, float) for f in
               ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0))]
    for b in BEACONS:
        to_b = np.asarray(b) - tx
        angles = [math.degrees(math.acos(
            float(np.dot(f, to_b) / np.linalg.norm(to_b)))) for f in facings]
        assert min(angles) <= 60.0  # oracle claim
        assert any(beam_visible(tx, f, b, 60.0) for f in facings)


def test_clover_gap_above_the_beams():
    # The horizontal arrangement is blind straight up: a receiver
    # overhead at more than the half-angle off every beam axis is missed.
    tx = (2.5, 2.5, 0.5)
    overhead = (2.5, 2.5, 2.9)
    facings = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0))
    assert not any(beam_visible(tx, f, overhead, 60.0) for f in facings)
