"""Frequency-hopped ultrasonic waveform synthesis.

A ranging burst is a BPSK-modulated slow-frequency-hopping waveform: every
data bit rides on one carrier drawn from a small ultrasonic set, one hop per
bit.  The transmitter keeps a copy of each burst so the receiver side can
correlate against exactly what was sent.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ArgumentError, ConfigurationError

# Carrier set: six 5 kHz sub-bands spanning 25-55 kHz.
DEFAULT_CARRIERS_HZ: tuple[float, ...] = (
    27500.0, 32500.0, 37500.0, 42500.0, 47500.0, 52500.0)
DEFAULT_SUB_BAND_HZ = 5000.0
DEFAULT_SAMPLE_RATE_HZ = 340_000.0
DEFAULT_BIT_DURATION_S = 1e-3
DEFAULT_BITS_PER_BURST = 64


def _as_rng(seed: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True, eq=False)
class BitSequence:
    """Antipodal data bits, each exactly -1 or +1."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.int8)
        if bits.ndim != 1 or bits.size == 0:
            raise ArgumentError("bits must be a non-empty 1-D sequence")
        if not np.all(np.abs(bits) == 1):
            raise ArgumentError("bits must take values in {-1, +1}")
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return int(self.bits.size)


def random_bits(n_bits: int, seed: int | np.random.Generator = 0) -> BitSequence:
    """Draw ``n_bits`` equiprobable antipodal bits from a seeded generator."""
    if n_bits < 1:
        raise ArgumentError("n_bits must be >= 1")
    rng = _as_rng(seed)
    return BitSequence(rng.choice(np.array([-1, 1], dtype=np.int8), size=n_bits))


@dataclass(frozen=True, eq=False)
class HopPlan:
    """Carrier assignment for one burst: one carrier per bit.

    Args:
        carrier_hz_per_bit: carrier frequency used by each bit, in Hz.
        carrier_set: the allowed carrier set the plan was drawn from.
        sub_band_hz: width of the sub-band owned by each carrier.
        seed: seed the plan was drawn with, or None for handmade plans.
    """

    carrier_hz_per_bit: np.ndarray
    carrier_set: tuple[float, ...] = DEFAULT_CARRIERS_HZ
    sub_band_hz: float = DEFAULT_SUB_BAND_HZ
    seed: int | None = None

    def __post_init__(self):
        carriers = np.asarray(self.carrier_hz_per_bit, dtype=np.float64)
        if carriers.ndim != 1 or carriers.size == 0:
            raise ArgumentError("carrier_hz_per_bit must be a non-empty 1-D sequence")
        cset = tuple(float(f) for f in self.carrier_set)
        if len(cset) == 0:
            raise ConfigurationError("carrier_set must not be empty")
        if any(f <= 0 for f in cset):
            raise ConfigurationError("carrier frequencies must be positive")
        if not float(self.sub_band_hz) > 0:
            raise ConfigurationError("sub_band_hz must be positive")
        if not np.all(np.isin(carriers, np.asarray(cset))):
            raise ArgumentError("every per-bit carrier must belong to carrier_set")
        object.__setattr__(self, "carrier_hz_per_bit", carriers)
        object.__setattr__(self, "carrier_set", cset)
        object.__setattr__(self, "sub_band_hz", float(self.sub_band_hz))

    def __len__(self) -> int:
        return int(self.carrier_hz_per_bit.size)


@dataclass(frozen=True, eq=False)
class SignalFrame:
    """A finite stretch of uniformly sampled signal.

    Args:
        samples: 1-D sample array.
        sample_rate_hz: sampling rate, > 0.
        t0_s: time of the first sample relative to the burst clock.
    """

    samples: np.ndarray
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ
    t0_s: float = 0.0

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1 or samples.size == 0:
            raise ArgumentError("samples must be a non-empty 1-D array")
        if not np.all(np.isfinite(samples)):
            raise ArgumentError("samples must be finite")
        if not float(self.sample_rate_hz) > 0:
            raise ArgumentError("sample_rate_hz must be positive")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))
        object.__setattr__(self, "t0_s", float(self.t0_s))

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


def make_hop_plan(n_bits: int,
                  carrier_set: Sequence[float] = DEFAULT_CARRIERS_HZ,
                  seed: int | np.random.Generator = 0,
                  sub_band_hz: float = DEFAULT_SUB_BAND_HZ) -> HopPlan:
    """Draw a hop plan of ``n_bits`` carriers uniformly from ``carrier_set``.

    The draw is i.i.d. uniform over the set, so over many bits each carrier
    is used with frequency 1/len(carrier_set).

    Args:
        n_bits: number of bits (hops) in the burst, >= 1.
        carrier_set: allowed carriers in Hz; must be non-empty and positive.
        seed: integer seed or an already-constructed numpy Generator.
        sub_band_hz: sub-band width recorded on the plan.

    Returns:
        A HopPlan with one carrier per bit.
    """
    if n_bits < 1:
        raise ArgumentError("n_bits must be >= 1")
    cset = tuple(float(f) for f in carrier_set)
    if len(cset) == 0:
        raise ConfigurationError("carrier_set must not be empty")
    rng = _as_rng(seed)
    carriers = rng.choice(np.asarray(cset, dtype=np.float64), size=n_bits)
    stored_seed = seed if isinstance(seed, int) else None
    return HopPlan(carriers, cset, sub_band_hz, stored_seed)


def samples_per_bit(bit_duration_s: float, sample_rate_hz: float) -> int:
    """Number of samples one bit occupies (rounded; must be >= 1)."""
    if not bit_duration_s > 0:
        raise ArgumentError("bit_duration_s must be positive")
    if not sample_rate_hz > 0:
        raise ArgumentError("sample_rate_hz must be positive")
    n = int(round(bit_duration_s * sample_rate_hz))
    if n < 1:
        raise ArgumentError("bit_duration_s * sample_rate_hz must be >= 1")
    return n


# Per-carrier single-bit waveforms, keyed by (samples per bit, sample rate,
# start phase, carrier values).  Synthesis only gathers from this table.
_BIT_WAVE_CACHE: dict[tuple, np.ndarray] = {}


def synthesize_fhss(bits: BitSequence,
                    plan: HopPlan,
                    bit_duration_s: float = DEFAULT_BIT_DURATION_S,
                    phase_rad: float = 0.0,
                    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ) -> SignalFrame:
    """Synthesize one BPSK/FHSS burst.

    Bit ``j`` occupies samples ``[j*n, (j+1)*n)`` where ``n`` is the per-bit
    sample count, and equals ``bits[j] * sin(2*pi*f_j*t + phase_rad)`` with
    ``t`` restarting at zero on every hop boundary (phase is reset per hop).

    Args:
        bits: antipodal data bits.
        plan: hop plan; must have the same length as ``bits``.
        bit_duration_s: duration of one bit/hop in seconds.
        phase_rad: carrier phase at each hop start.
        sample_rate_hz: output sampling rate; must satisfy Nyquist for the
            highest carrier in the plan's carrier set.

    Returns:
        SignalFrame of ``len(bits) * n`` samples with ``t0_s = 0``.
    """
    if len(bits) != len(plan):
        raise ArgumentError(
            f"bits ({len(bits)}) and plan ({len(plan)}) lengths differ")
    if sample_rate_hz < 2.0 * max(plan.carrier_set):
        raise ConfigurationError(
            "sample_rate_hz must be at least twice the highest carrier "
            f"({max(plan.carrier_set):.0f} Hz) to avoid aliasing")
    n = samples_per_bit(bit_duration_s, sample_rate_hz)
    # One sine per distinct carrier; a burst only ever uses a handful of
    # carriers, so the per-carrier bit waveforms are cached and gathered.
    unique, inv = np.unique(plan.carrier_hz_per_bit, return_inverse=True)
    key = (n, float(sample_rate_hz), float(phase_rad), unique.tobytes())
    waves = _BIT_WAVE_CACHE.get(key)
    if waves is None:
        t_local = np.arange(n) / sample_rate_hz
        phases = 2.0 * np.pi * unique[:, None] * t_local[None, :]
        waves = np.sin(phases + phase_rad)
        if len(_BIT_WAVE_CACHE) > 32:
            _BIT_WAVE_CACHE.clear()
        _BIT_WAVE_CACHE[key] = waves
    per_bit = waves[inv]
    samples = (bits.bits.astype(np.float64)[:, None] * per_bit).ravel()
    return SignalFrame(samples, sample_rate_hz, 0.0)


def reference_copy(bits: BitSequence,
                   plan: HopPlan,
                   bit_duration_s: float = DEFAULT_BIT_DURATION_S,
                   phase_rad: float = 0.0,
                   sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ) -> SignalFrame:
    """The receiver-side replica of a burst: identical samples, ``t0_s = 0``.

    Kept as a named operation so call sites say what they mean; the replica
    is bit-for-bit the transmitted frame.
    """
    return synthesize_fhss(bits, plan, bit_duration_s, phase_rad, sample_rate_hz)
