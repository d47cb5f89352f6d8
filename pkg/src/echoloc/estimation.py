"""Receiver-side range estimation: TOA, Doppler, and Kalman fusion.

One ranging burst yields a time of arrival (correlation against the
transmitted replica) and a radial-velocity estimate (per-bit spectral
shift).  A scalar Kalman filter fuses the TOA distance with the
Doppler-predicted motion into a smoothed per-beacon distance track.
"""
from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.fft as sfft

from .channel import SoundSpeed
from .errors import ArgumentError, NoSignalError
from .signals import (DEFAULT_BIT_DURATION_S, HopPlan, SignalFrame,
                      samples_per_bit)


@dataclass(frozen=True)
class ToaResult:
    """Time-of-arrival estimate for one burst.

    Args:
        peak_sample: correlation-peak lag in samples (>= 0).
        peak_value: correlation value at the peak.
        distance_m: distance implied by the peak: c * peak_sample / fs.
        quality: ratio of the peak to the strongest correlation value more
            than one bit duration away (inf when nothing else is there).
    """

    peak_sample: int
    peak_value: float
    distance_m: float
    quality: float

    def __post_init__(self):
        if self.peak_sample < 0:
            raise ArgumentError("peak_sample must be >= 0")
        if not self.distance_m >= 0:
            raise ArgumentError("distance_m must be >= 0")
        if not (self.quality >= 1.0 or math.isinf(self.quality)):
            raise ArgumentError("quality must be >= 1")


@dataclass(frozen=True)
class DopplerResult:
    """Doppler estimate for one burst.

    ``shift_hz`` is the mean spectral displacement over the bits of the
    burst; ``velocity_mps`` converts each bit's shift with its own carrier
    (v = c * shift / carrier) and averages.  Positive values mean the
    transmitter is closing in.
    """

    shift_hz: float
    velocity_mps: float


@dataclass(frozen=True)
class KalmanState:
    """Scalar distance-filter state for one beacon.

    ``q_std_m`` and ``r_std_m`` are the process and measurement noise
    levels expressed as standard deviations; the recursion squares them
    into variances.

    Args:
        d_hat_m: current distance estimate.
        p_hat: current estimate variance (m^2).
        q_std_m: process noise std dev per update, >= 0.
        r_std_m: TOA measurement noise std dev, >= 0.
    """

    d_hat_m: float
    p_hat: float
    q_std_m: float
    r_std_m: float

    def __post_init__(self):
        if not math.isfinite(self.d_hat_m):
            raise ArgumentError("d_hat_m must be finite")
        if not self.p_hat >= 0:
            raise ArgumentError("p_hat must be >= 0")
        if not (self.q_std_m >= 0 and self.r_std_m >= 0):
            raise ArgumentError("noise std devs must be >= 0")


@dataclass(frozen=True, eq=False)
class RangeTrack:
    """Per-beacon ranging time series over a run.

    ``toa`` and ``doppler`` hold one entry per burst (None where the burst
    was missing or carried no signal); ``fused_m`` is the Kalman output with
    NaN at the gaps.
    """

    beacon_id: int
    t_s: np.ndarray
    toa: tuple
    doppler: tuple
    fused_m: np.ndarray

    @property
    def raw_m(self) -> np.ndarray:
        """Raw TOA distances with NaN at the gaps."""
        return np.array([r.distance_m if r is not None else np.nan
                         for r in self.toa])


# --------------------------------------------------------------------------
# time of arrival

_REF_FFT_CACHE: dict[tuple, tuple] = {}


def _reference_fft(reference: np.ndarray, nfft: int) -> np.ndarray:
    # conj(FFT(reference)) reused across the beacons of one burst; keyed by
    # array identity so a cache hit can never alias different data.
    key = (id(reference), nfft)
    hit = _REF_FFT_CACHE.get(key)
    if hit is not None and hit[0]() is reference:
        return hit[1]
    ref_fft = np.conj(sfft.rfft(reference, nfft))
    if len(_REF_FFT_CACHE) > 16:
        _REF_FFT_CACHE.clear()
    try:
        _REF_FFT_CACHE[key] = (weakref.ref(reference), ref_fft)
    except TypeError:
        pass
    return ref_fft


def cross_correlate(received: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Cross-correlation of ``received`` against ``reference`` via FFT.

    Returns the correlation at every physically meaningful lag
    ``k = 0 .. len(received) - len(reference)``, i.e.
    ``corr[k] = sum_n received[n + k] * reference[n]``.  Equals
    ``np.correlate(received, reference, mode="valid")`` to rounding error
    but runs in O(N log N).
    """
    received = np.asarray(received)
    reference = np.asarray(reference)
    if received.ndim != 1 or reference.ndim != 1 or reference.size == 0:
        raise ArgumentError("received and reference must be non-empty 1-D arrays")
    if received.size < reference.size:
        raise ArgumentError("received must be at least as long as reference")
    nfft = sfft.next_fast_len(received.size)
    spec = sfft.rfft(received, nfft) * _reference_fft(reference, nfft)
    corr = sfft.irfft(spec, nfft)
    return corr[:received.size - reference.size + 1]


def estimate_toa(received: SignalFrame,
                 reference: SignalFrame,
                 c: SoundSpeed,
                 bit_duration_s: float = DEFAULT_BIT_DURATION_S) -> ToaResult:
    """Time of arrival of a burst by correlation against its replica.

    The arrival is the argmax of the cross-correlation over non-negative
    lags; the implied one-way distance is ``c * peak_sample / fs``.

    Args:
        received: received frame (at least as long as the reference).
        reference: transmitted replica.
        c: speed of sound for the distance conversion.
        bit_duration_s: width of the exclusion window (one bit each side of
            the peak) used for the quality ratio.

    Returns:
        ToaResult; ``quality`` compares the peak to the strongest
        correlation outside the exclusion window.

    Raises:
        NoSignalError: all-zero received samples, or no positive
            correlation anywhere.
    """
    if received.sample_rate_hz != reference.sample_rate_hz:
        raise ArgumentError("received and reference sample rates differ")
    if not np.any(received.samples):
        raise NoSignalError("received frame is all zeros")
    corr = cross_correlate(received.samples, reference.samples)
    peak = int(np.argmax(corr))
    peak_value = float(corr[peak])
    if peak_value <= 0:
        raise NoSignalError("no positive correlation with the reference")
    w = samples_per_bit(bit_duration_s, received.sample_rate_hz)
    outside = np.concatenate([corr[:max(0, peak - w)], corr[peak + w + 1:]])
    if outside.size == 0:
        quality = math.inf
    else:
        strongest = float(np.max(outside))
        quality = peak_value / strongest if strongest > 0 else math.inf
    fs = received.sample_rate_hz
    return ToaResult(peak, peak_value, c.value_mps * peak / fs, quality)


# --------------------------------------------------------------------------
# velocity-compensated correlation
#
# A moving transmitter time-scales the whole burst by (1 + v/c).  Over a
# 64 ms burst at 340 kHz even 0.3 m/s slides the last bit ~20 samples
# against the first, so a rigid correlation smears its peak into the
# bit-aligned sidelobe floor and the argmax can jump by whole bits.  The
# tracker therefore correlates the burst in short segments and re-aligns
# them with per-segment lag offsets predicted from the velocity estimate;
# at v = 0 the segment sum equals the rigid correlation exactly.

_N_SEGMENTS = 16

_SEG_FFT_CACHE: dict[tuple, tuple] = {}


def _segment_ffts(reference: np.ndarray, n_segments: int,
                  nfft: int) -> np.ndarray:
    # conj(FFT(segment)) per segment, reused across the beacons of one
    # burst; keyed by array identity with a weakref check so a recycled
    # id can never alias different data.
    key = (id(reference), n_segments, nfft)
    hit = _SEG_FFT_CACHE.get(key)
    if hit is not None and hit[0]() is reference:
        return hit[1]
    seg_len = reference.size // n_segments
    segs = reference[:n_segments * seg_len].reshape(n_segments, seg_len)
    ffts = np.conj(sfft.rfft(segs, nfft, axis=1))
    if len(_SEG_FFT_CACHE) > 16:
        _SEG_FFT_CACHE.clear()
    try:
        _SEG_FFT_CACHE[key] = (weakref.ref(reference), ffts)
    except TypeError:
        pass
    return ffts


def _segment_offsets(ref_size: int, n_segments: int, velocity_mps: float,
                     c: SoundSpeed) -> np.ndarray:
    # Segment s of the reference is centered n_s samples into the burst; a
    # time scale (1 + v/c) shifts its arrival by -(n_s - mid) * v/c samples
    # relative to the burst center.  Offsetting each segment's correlation
    # by the negated shift stacks all peaks at the burst-center lag, which
    # is also where the rigid correlation centers its (smeared) peak.
    seg_len = ref_size // n_segments
    centers = np.arange(n_segments) * seg_len + (seg_len - 1) / 2.0
    mid = (ref_size - 1) / 2.0
    return np.rint((centers - mid) * velocity_mps / c.value_mps).astype(int)


def _toa_from_window(combined: np.ndarray, lag_lo: int, w: int,
                     c: SoundSpeed, fs: float) -> ToaResult:
    idx = int(np.argmax(combined))
    peak_value = float(combined[idx])
    if peak_value <= 0:
        raise NoSignalError("no positive correlation with the reference")
    outside = np.concatenate([combined[:max(0, idx - w)],
                              combined[idx + w + 1:]])
    if outside.size == 0:
        quality = math.inf
    else:
        strongest = float(np.max(outside))
        quality = peak_value / strongest if strongest > 0 else math.inf
    peak = lag_lo + idx
    return ToaResult(peak, peak_value, c.value_mps * peak / fs, quality)


def _compensated_toa(received: SignalFrame, reference: SignalFrame,
                     c: SoundSpeed, velocity_mps: float, center_sample: int,
                     half_window: int,
                     bit_duration_s: float = DEFAULT_BIT_DURATION_S,
                     n_segments: int = _N_SEGMENTS) -> ToaResult:
    """Velocity-compensated TOA over a window of lags around a prediction.

    Correlates each reference segment against its own slice of the
    received frame (displaced by the segment's predicted Doppler slide)
    and sums the per-segment correlations; the argmax of the sum is the
    arrival referenced to the burst center.

    Raises:
        NoSignalError: the window lies outside the frame or holds no
            positive correlation.
    """
    rx = received.samples
    ref = reference.samples
    fs = received.sample_rate_hz
    seg_len = ref.size // n_segments
    lag_lo = max(0, center_sample - half_window)
    lag_hi = min(center_sample + half_window, rx.size - ref.size)
    if lag_hi < lag_lo:
        raise NoSignalError("search window lies outside the received frame")
    n_lags = lag_hi - lag_lo + 1
    offsets = _segment_offsets(ref.size, n_segments, velocity_mps, c)

    # A closing transmitter (v > 0) compresses the burst, so segments past
    # the center arrive early: each slice is displaced by the negated
    # offset, and the combined argmax then reads in burst-center lags.
    slice_len = seg_len + n_lags - 1
    slices = np.empty((n_segments, slice_len), dtype=rx.dtype)
    for s in range(n_segments):
        start = lag_lo + s * seg_len - int(offsets[s])
        stop = start + slice_len
        if start >= 0 and stop <= rx.size:
            slices[s] = rx[start:stop]
            continue
        a, b = max(start, 0), min(stop, rx.size)
        slices[s] = 0.0
        if a < b:
            slices[s, a - start:b - start] = rx[a:b]

    # The per-segment correlations only ever get summed, so sum their
    # spectra instead and invert once.
    nfft = sfft.next_fast_len(slice_len)
    seg_ffts = _segment_ffts(ref, n_segments, nfft)
    spec = (sfft.rfft(slices, nfft, axis=1) * seg_ffts).sum(axis=0)
    combined = sfft.irfft(spec, nfft)[:n_lags]
    w = samples_per_bit(bit_duration_s, fs)
    return _toa_from_window(combined, lag_lo, w, c, fs)


def _search_toa(received: SignalFrame, reference: SignalFrame, c: SoundSpeed,
                speed_span_mps: float, speed_step_mps: float,
                bit_duration_s: float = DEFAULT_BIT_DURATION_S,
                n_segments: int = _N_SEGMENTS) -> tuple[ToaResult, float]:
    """Joint lag/velocity search over all lags (tracker cold start).

    Scans a symmetric velocity grid, combining the per-segment full-lag
    correlations with each candidate's offsets, and keeps the candidate
    with the strongest combined peak.  The v = 0 candidate reproduces the
    rigid correlation, so this can only improve on estimate_toa.

    Returns:
        (ToaResult, best candidate velocity in m/s).
    """
    rx = received.samples
    ref = reference.samples
    fs = received.sample_rate_hz
    if rx.size < ref.size:
        raise ArgumentError("received must be at least as long as reference")
    seg_len = ref.size // n_segments
    n_lags = rx.size - ref.size + 1
    slice_len = seg_len + n_lags - 1

    starts = np.arange(n_segments) * seg_len
    idx = starts[:, None] + np.arange(slice_len)[None, :]
    slices = rx[idx]
    nfft = sfft.next_fast_len(slice_len)
    seg_ffts = _segment_ffts(ref, n_segments, nfft)
    corr = sfft.irfft(sfft.rfft(slices, nfft, axis=1) * seg_ffts,
                      nfft, axis=1)[:, :n_lags]

    n_steps = max(0, int(math.floor(speed_span_mps / speed_step_mps + 1e-9)))
    grid = np.arange(-n_steps, n_steps + 1) * speed_step_mps
    best_val = -math.inf
    best_combined = None
    best_v = 0.0
    for v in grid:
        offsets = _segment_offsets(ref.size, n_segments, float(v), c)
        combined = np.zeros(n_lags, dtype=np.float64)
        for s in range(n_segments):
            d = int(offsets[s])
            if d == 0:
                combined += corr[s]
            elif d > 0:
                combined[d:] += corr[s, :n_lags - d]
            else:
                combined[:n_lags + d] += corr[s, -d:]
        val = float(np.max(combined))
        if val > best_val:
            best_val = val
            best_combined = combined
            best_v = float(v)
    w = samples_per_bit(bit_duration_s, fs)
    toa = _toa_from_window(best_combined, 0, w, c, fs)
    return toa, best_v


# --------------------------------------------------------------------------
# Doppler

_HANN_CACHE: dict[tuple, np.ndarray] = {}


def _hann(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).str)
    win = _HANN_CACHE.get(key)
    if win is None:
        win = np.hanning(n).astype(dtype)
        if len(_HANN_CACHE) > 16:
            _HANN_CACHE.clear()
        _HANN_CACHE[key] = win
    return win


def estimate_doppler(received: SignalFrame,
                     plan: HopPlan,
                     c: SoundSpeed,
                     bit_duration_s: float = DEFAULT_BIT_DURATION_S) -> DopplerResult:
    """Radial velocity from per-bit spectral shifts.

    The frame is assumed to start at the first bit of the burst (slice the
    received signal at the TOA before calling).  Each bit window is Hann
    weighted, zero-padded, and searched for its magnitude peak inside the
    bit's own sub-band; a three-point parabolic fit on the log magnitude
    refines the peak to sub-bin accuracy.  Per bit,
    ``v_j = c * (peak_j - carrier_j) / carrier_j``; the estimate averages
    over all bits.  Positive velocity = closing = raised frequency.

    Args:
        received: frame starting at the burst (spans at least one full bit).
        plan: the burst's hop plan.
        c: speed of sound.
        bit_duration_s: bit/hop duration used to segment the frame.

    Returns:
        DopplerResult with the mean shift and mean velocity.
    """
    n_spb = samples_per_bit(bit_duration_s, received.sample_rate_hz)
    n_bits = min(len(plan), received.samples.size // n_spb)
    if n_bits < 1:
        raise ArgumentError("received must span at least one full bit")
    fs = received.sample_rate_hz
    carriers = plan.carrier_hz_per_bit[:n_bits]

    windows = received.samples[:n_bits * n_spb].reshape(n_bits, n_spb)
    windows = windows * _hann(n_spb, received.samples.dtype)
    nfft = 1 << max(1, (3 * n_spb - 1)).bit_length()
    spec = sfft.rfft(windows, nfft, axis=1)
    df = fs / nfft
    n_bins = spec.shape[1]

    half_band = plan.sub_band_hz / 2.0
    lo = np.clip(np.ceil((carriers - half_band) / df).astype(int), 0, n_bins - 1)
    hi = np.clip(np.floor((carriers + half_band) / df).astype(int) + 1, 1, n_bins)
    if np.any(hi - lo < 1):
        raise ArgumentError("sub-band narrower than one FFT bin")

    # Magnitudes are only needed over the union of the per-bit sub-bands
    # (plus one guard bin each side for the parabola below).
    b_lo = max(int(lo.min()) - 1, 0)
    b_hi = min(int(hi.max()) + 1, n_bins)
    mag = np.abs(spec[:, b_lo:b_hi])

    # Per-bit in-band argmax (magnitudes are >= 0, so -1 masks cleanly).
    bins = np.arange(b_lo, b_hi)
    in_band = (bins >= lo[:, None]) & (bins < hi[:, None])
    k = np.argmax(np.where(in_band, mag, -1.0), axis=1) + b_lo

    # Three-point parabolic refinement on the log magnitude, skipped at the
    # spectrum edges and wherever the points fail to form a cap.  An in-band
    # peak always sits at least one guard bin inside the magnitude slice.
    delta = np.zeros(n_bits)
    interior = np.flatnonzero((k > 0) & (k < n_bins - 1))
    if interior.size:
        ki = k[interior] - b_lo
        tiny = np.finfo(np.float64).tiny
        a = np.log(mag[interior, ki - 1] + tiny)
        b = np.log(mag[interior, ki] + tiny)
        cc = np.log(mag[interior, ki + 1] + tiny)
        denom = a - 2.0 * b + cc
        refine = denom < 0
        fit = np.zeros(interior.size)
        fit[refine] = np.clip(0.5 * (a[refine] - cc[refine]) / denom[refine],
                              -1.0, 1.0)
        delta[interior] = fit

    f_peak = (k + delta) * df
    shifts = f_peak - carriers
    velocities = c.value_mps * shifts / carriers
    return DopplerResult(float(np.mean(shifts)), float(np.mean(velocities)))


# --------------------------------------------------------------------------
# Kalman fusion

def kalman_update(state: KalmanState,
                  toa_distance_m: float,
                  doppler_velocity_mps: float,
                  dt_s: float) -> KalmanState:
    """One scalar Kalman step fusing a TOA distance with predicted motion.

    The prediction is ``d_hat + v * dt``; ``doppler_velocity_mps`` is
    therefore the rate of change of the distance (positive = receding).
    With ``q = q_std**2`` and ``r = r_std**2``::

        gain  = (p + q) / (p + q + r)
        d_new = pred + gain * (toa - pred)
        p_new = r * (p + q) / (p + q + r)

    ``r -> inf`` degenerates to pure dead reckoning, ``r -> 0`` to trusting
    the TOA outright.  For q, r > 0 the gain stays in (0, 1) and the
    posterior variance never exceeds r.

    Args:
        state: current filter state (carries q_std_m / r_std_m).
        toa_distance_m: measured distance for this burst.
        doppler_velocity_mps: distance rate of change since the last update.
        dt_s: time since the last update, >= 0.

    Returns:
        The updated KalmanState.
    """
    if not (math.isfinite(toa_distance_m) and toa_distance_m >= 0):
        raise ArgumentError("toa_distance_m must be finite and >= 0")
    if not (math.isfinite(dt_s) and dt_s >= 0):
        raise ArgumentError("dt_s must be finite and >= 0")
    q = state.q_std_m ** 2
    r = state.r_std_m ** 2
    pq = state.p_hat + q
    if pq + r <= 0:
        raise ArgumentError("p_hat + q and r must not both be zero")
    pred = state.d_hat_m + doppler_velocity_mps * dt_s
    gain = pq / (pq + r)
    d_new = pred + gain * (toa_distance_m - pred)
    p_new = r * pq / (pq + r)
    return KalmanState(d_new, p_new, state.q_std_m, state.r_std_m)


@dataclass(frozen=True, eq=False)
class RangePipelineConfig:
    """Settings for the per-beacon burst-to-distance pipeline.

    Args:
        c: speed of sound.
        burst_times_s: timestamp of each burst (strictly increasing).
        bit_duration_s: bit/hop duration of the waveform.
        r_std_m: TOA noise std dev; None picks two TOA quanta (2*c/fs).
        q_speed_fraction: process noise grows as this fraction of the
            distance moved per update.
        q_floor_m: lower bound on the per-update process noise std dev.
        beacon_id: id stamped on the resulting track.
        assist: when True, the tracker measures TOA with the
            velocity-compensated segmented correlation, gated around the
            filter prediction once the track is warm; when False, every
            burst uses the plain rigid correlation (the stage-1 benchmark
            behavior).
        gate_half_window_m: half-width of the warm-track search gate.
        search_speed_span_mps: half-span of the cold-start velocity grid.
        search_speed_step_mps: step of the cold-start velocity grid.
        doppler_bits: number of leading bits fed to the per-burst Doppler
            estimate, or None for every bit.  The radial speed is constant
            across one burst, so a prefix measures the same shift; the
            leading bits are also the ones least smeared by the time
            scaling, whose window misalignment grows toward the burst end.
        quality_floor: warm-gate measurements whose peak dominance falls
            below this ratio are re-measured with the full joint search (a
            healthy gated peak stays well above it at any usable SNR).
        doppler_gate_mps: per-burst velocity estimates further than this
            from the tracked speed are treated as outliers and ignored.
    """

    c: SoundSpeed
    burst_times_s: np.ndarray
    bit_duration_s: float = DEFAULT_BIT_DURATION_S
    r_std_m: float | None = None
    q_speed_fraction: float = 0.1
    q_floor_m: float = 1e-3
    beacon_id: int = 0
    assist: bool = True
    gate_half_window_m: float = 0.6
    search_speed_span_mps: float = 0.75
    search_speed_step_mps: float = 0.05
    doppler_bits: int | None = None
    quality_floor: float = 1.5
    doppler_gate_mps: float = 0.5


class _RangeTracker:
    """Streams bursts for one beacon through TOA, Doppler and the filter."""

    def __init__(self, config: RangePipelineConfig):
        self.config = config
        self.state: KalmanState | None = None
        self.last_t: float | None = None
        self.last_v_mps = 0.0
        self._edge_hits = 0
        self._misses = 0

    def _r_std(self, sample_rate_hz: float) -> float:
        if self.config.r_std_m is not None:
            return self.config.r_std_m
        return 2.0 * self.config.c.value_mps / sample_rate_hz

    def _cold_start(self, received: SignalFrame,
                    reference: SignalFrame) -> ToaResult:
        cfg = self.config
        toa, grid_v = _search_toa(received, reference, cfg.c,
                                  cfg.search_speed_span_mps,
                                  cfg.search_speed_step_mps,
                                  cfg.bit_duration_s)
        self.last_v_mps = grid_v
        return toa

    def step(self, received: SignalFrame | None, reference: SignalFrame,
             plan: HopPlan, t_s: float):
        """Returns (toa, doppler, fused_distance) for one burst."""
        cfg = self.config
        if received is None:
            return None, None, math.nan
        fs = received.sample_rate_hz
        try:
            if not cfg.assist:
                toa = estimate_toa(received, reference, cfg.c,
                                   cfg.bit_duration_s)
            elif self.state is None:
                toa = self._cold_start(received, reference)
            else:
                # Gate the search around the filter prediction; the rate
                # of change of distance is the negated closing speed.
                dt = t_s - self.last_t
                pred_d = self.state.d_hat_m - self.last_v_mps * dt
                center = int(round(pred_d * fs / cfg.c.value_mps))
                half = max(1, int(round(cfg.gate_half_window_m * fs
                                        / cfg.c.value_mps)))
                toa = _compensated_toa(received, reference, cfg.c,
                                       self.last_v_mps, center, half,
                                       cfg.bit_duration_s)
                if toa.quality < cfg.quality_floor:
                    # A weak, barely dominant peak usually means the
                    # tracked speed has drifted and the compensation is
                    # smearing the true arrival; re-measure from scratch.
                    self._edge_hits = 0
                    toa = self._cold_start(received, reference)
                else:
                    # A peak hugging the gate edge twice running means the
                    # track has lost the arrival: fall back to a full
                    # search.
                    if abs(toa.peak_sample - center) >= half - 8:
                        self._edge_hits += 1
                    else:
                        self._edge_hits = 0
                    if self._edge_hits >= 2:
                        self._edge_hits = 0
                        self.state = None
                        toa = self._cold_start(received, reference)
        except NoSignalError:
            if cfg.assist and self.state is not None:
                # Repeated failures inside the gate mean the prediction
                # itself is off; restart cold on the next burst.
                self._misses += 1
                if self._misses >= 3:
                    self.state = None
                    self._misses = 0
            return None, None, math.nan
        self._misses = 0

        n_spb = samples_per_bit(cfg.bit_duration_s, fs)
        segment = received.samples[toa.peak_sample:
                                   toa.peak_sample + reference.samples.size]
        if cfg.doppler_bits is not None:
            segment = segment[:cfg.doppler_bits * n_spb]
        doppler = None
        if segment.size >= n_spb:
            doppler = estimate_doppler(
                SignalFrame(segment, fs), plan, cfg.c, cfg.bit_duration_s)
        if doppler is not None:
            v_new = doppler.velocity_mps
            # Exponentially smoothed: the gate offsets and the prediction
            # are sensitive to velocity noise, and the radial speed moves
            # far less between bursts than one burst's estimate scatters.
            # Estimates far from the tracked speed are outliers (e.g. from
            # a frame whose arrival was measured off the true peak), and
            # the compensation is only designed for the search span.
            if abs(v_new - self.last_v_mps) <= cfg.doppler_gate_mps:
                self.last_v_mps = 0.5 * (self.last_v_mps + v_new)
                if self.last_v_mps > cfg.search_speed_span_mps:
                    self.last_v_mps = cfg.search_speed_span_mps
                elif self.last_v_mps < -cfg.search_speed_span_mps:
                    self.last_v_mps = -cfg.search_speed_span_mps
        # DopplerResult is closing-positive; the filter predicts distance,
        # so the rate of change of distance is the negated closing speed.
        # A burst without a Doppler estimate keeps the tracked speed.
        range_rate = -self.last_v_mps

        if self.state is None:
            r_std = self._r_std(fs)
            self.state = KalmanState(toa.distance_m, r_std ** 2,
                                     cfg.q_floor_m, r_std)
        else:
            dt = t_s - (self.last_t if self.last_t is not None else t_s)
            q_std = cfg.q_speed_fraction * abs(range_rate) * dt + cfg.q_floor_m
            self.state = kalman_update(replace(self.state, q_std_m=q_std),
                                       toa.distance_m, range_rate, dt)
        self.last_t = t_s
        return toa, doppler, self.state.d_hat_m


def run_range_pipeline(received_frames: Sequence[SignalFrame | None],
                       references: Sequence[SignalFrame],
                       plans: Sequence[HopPlan],
                       config: RangePipelineConfig) -> RangeTrack:
    """Run the TOA + Doppler + Kalman chain over one beacon's bursts.

    Missing frames and no-signal bursts become gap entries: the filter
    state is carried over unchanged and the fused distance is NaN for that
    burst.  The first valid burst initializes the filter at the raw TOA
    distance with variance r (one measurement of confidence).

    Args:
        received_frames: one received frame per burst; None marks a gap.
        references: the transmitted replica of each burst.
        plans: hop plan of each burst.
        config: pipeline settings (times, noise levels, sound speed).

    Returns:
        RangeTrack over all bursts.
    """
    times = np.asarray(config.burst_times_s, dtype=np.float64)
    n = times.size
    if not (len(received_frames) == len(references) == len(plans) == n):
        raise ArgumentError("frames, references, plans and burst times must "
                            "have equal lengths")
    if n == 0:
        raise ArgumentError("at least one burst is required")
    if np.any(np.diff(times) <= 0):
        raise ArgumentError("burst times must be strictly increasing")

    tracker = _RangeTracker(config)
    toas, dopplers, fused = [], [], np.full(n, np.nan)
    for k in range(n):
        toa, doppler, d = tracker.step(received_frames[k], references[k],
                                       plans[k], float(times[k]))
        toas.append(toa)
        dopplers.append(doppler)
        fused[k] = d
    return RangeTrack(config.beacon_id, times, tuple(toas), tuple(dopplers),
                      fused)
