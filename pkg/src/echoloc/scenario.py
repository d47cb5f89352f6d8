"""Experiment descriptions: room, beacons, clover transmitter, trajectory.

A :class:`RoomScenario` pins down everything a run needs.  Scenarios are
immutable after validation and serialize to a human-editable JSON file whose
keys carry explicit units (``..._m``, ``..._hz``, ``..._c``); the grammar is
documented in the README.
"""
from __future__ import annotations

import json
import math
import numbers
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicHermiteSpline, CubicSpline

from .channel import (FADING_NONE, FADING_RAYLEIGH, ChannelConfig, SoundSpeed,
                      beam_visible, sound_speed_from_temperature)
from .errors import (ArgumentError, ConfigurationError, ParseError,
                     ValidationError)
from .localization import DEFAULT_BEACON_POSITIONS_M, BeaconSet

DEFAULT_ROOM_DIMS_M = (5.0, 5.0, 3.0)
DEFAULT_BURST_RATE_HZ = 15.0
DEFAULT_TEMP_C = 20.0
DEFAULT_TRAJECTORY_MARGIN_M = 0.2
DEFAULT_CLOVER_FACINGS = ((1.0, 0.0, 0.0), (-1.0, 0.0, 0.0),
                          (0.0, 1.0, 0.0), (0.0, -1.0, 0.0))

# Sampling rate of generated trajectories; dense enough that the stored
# velocities agree with finite differences of the positions.
TRAJECTORY_SAMPLE_RATE_HZ = 50.0

# Stored velocity vs central finite difference of stored positions: relative
# tolerance plus an absolute floor so hovering does not trip the check.
_VEL_CONSISTENCY_REL = 0.05
_VEL_CONSISTENCY_FLOOR_MPS = 0.02


@dataclass(frozen=True)
class CloverConfig:
    """Four fixed transmitter beams mounted on the drone.

    Args:
        facings: the four beam axes (unnormalized is fine, zero is not);
            defaults to the horizontal +x, -x, +y, -y arrangement.
        half_angle_deg: cone half-angle shared by all four beams.
    """

    facings: tuple = DEFAULT_CLOVER_FACINGS
    half_angle_deg: float = 60.0

    def __post_init__(self):
        facings = tuple(tuple(float(x) for x in f) for f in self.facings)
        if len(facings) != 4:
            raise ValidationError("exactly four facings required",
                                  field="clover.facings")
        for i, f in enumerate(facings):
            if len(f) != 3 or not all(math.isfinite(x) for x in f):
                raise ValidationError("must be a finite 3-vector",
                                      field=f"clover.facings[{i}]")
            if math.hypot(*f) < 1e-12:
                raise ValidationError("must be a nonzero vector",
                                      field=f"clover.facings[{i}]")
        if not (math.isfinite(self.half_angle_deg)
                and 0.0 < self.half_angle_deg <= 180.0):
            raise ValidationError("must lie in (0, 180]",
                                  field="clover.half_angle_deg")
        object.__setattr__(self, "facings", facings)

    def any_visible(self, tx_pos_m, rx_pos_m) -> bool:
        """Whether any of the four beams covers the receiver."""
        return any(beam_visible(tx_pos_m, f, rx_pos_m, self.half_angle_deg)
                   for f in self.facings)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sampled flight path: times, positions, velocities.

    Between samples the path is the cubic Hermite interpolant of the stored
    positions and velocities; :meth:`state_at` queries it.

    Args:
        t_s: strictly increasing sample times, at least two.
        pos_m: positions, shape (n, 3).
        vel_mps: velocities, shape (n, 3); must agree with a central finite
            difference of the positions (5% relative, small absolute floor).
    """

    t_s: np.ndarray
    pos_m: np.ndarray
    vel_mps: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t_s, dtype=np.float64)
        pos = np.asarray(self.pos_m, dtype=np.float64)
        vel = np.asarray(self.vel_mps, dtype=np.float64)
        if t.ndim != 1 or t.size < 2:
            raise ValidationError("need at least two samples",
                                  field="trajectory.t_s")
        if pos.shape != (t.size, 3):
            raise ValidationError("shape must be (n_samples, 3)",
                                  field="trajectory.pos_m")
        if vel.shape != (t.size, 3):
            raise ValidationError("shape must be (n_samples, 3)",
                                  field="trajectory.vel_mps")
        for name, a in (("t_s", t), ("pos_m", pos), ("vel_mps", vel)):
            if not np.all(np.isfinite(a)):
                raise ValidationError("values must be finite",
                                      field=f"trajectory.{name}")
        if np.any(np.diff(t) <= 0):
            raise ValidationError("timestamps must be strictly increasing",
                                  field="trajectory.t_s")
        if t.size >= 3:
            fd = (pos[2:] - pos[:-2]) / (t[2:] - t[:-2])[:, None]
            mismatch = np.linalg.norm(vel[1:-1] - fd, axis=1)
            allowed = (_VEL_CONSISTENCY_REL * np.linalg.norm(fd, axis=1)
                       + _VEL_CONSISTENCY_FLOOR_MPS)
            if np.any(mismatch > allowed):
                i = int(np.argmax(mismatch - allowed)) + 1
                raise ValidationError(
                    f"row {i} disagrees with the finite difference of pos_m",
                    field="trajectory.vel_mps")
        object.__setattr__(self, "t_s", t)
        object.__setattr__(self, "pos_m", pos)
        object.__setattr__(self, "vel_mps", vel)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (np.array_equal(self.t_s, other.t_s)
                and np.array_equal(self.pos_m, other.pos_m)
                and np.array_equal(self.vel_mps, other.vel_mps))

    @property
    def duration_s(self) -> float:
        return float(self.t_s[-1])

    def _interpolants(self):
        cached = self.__dict__.get("_splines")
        if cached is None:
            sp = CubicHermiteSpline(self.t_s, self.pos_m, self.vel_mps,
                                    axis=0)
            cached = (sp, sp.derivative())
            object.__setattr__(self, "_splines", cached)
        return cached

    def state_at(self, t_s):
        """Position and velocity at time ``t_s`` (scalar or 1-D array).

        Returns:
            (position, velocity); shapes (3,) for scalar input, (k, 3)
            for array input.
        """
        t = np.asarray(t_s, dtype=np.float64)
        tol = 1e-9
        if np.any(t < self.t_s[0] - tol) or np.any(t > self.t_s[-1] + tol):
            raise ArgumentError("query time outside the trajectory span")
        pos_sp, vel_sp = self._interpolants()
        t = np.clip(t, self.t_s[0], self.t_s[-1])
        return pos_sp(t), vel_sp(t)


def radial_state(trajectory: Trajectory, t_s: float,
                 beacon_pos_m) -> tuple[float, float]:
    """Distance and radial velocity relative to one beacon.

    Args:
        trajectory: the flight path.
        t_s: query time within the trajectory span.
        beacon_pos_m: beacon coordinates.

    Returns:
        (distance_m, radial_velocity_mps); the velocity is positive when
        the transmitter closes on the beacon.
    """
    pos, vel = trajectory.state_at(float(t_s))
    to_beacon = np.asarray(beacon_pos_m, dtype=np.float64) - pos
    dist = float(np.linalg.norm(to_beacon))
    if dist < 1e-12:
        raise ArgumentError("trajectory point coincides with the beacon")
    return dist, float(np.dot(vel, to_beacon) / dist)


def random_trajectory(room_dims_m, duration_s: float, speed_cap_mps: float,
                      seed=None,
                      margin_m: float = DEFAULT_TRAJECTORY_MARGIN_M,
                      sample_rate_hz: float = TRAJECTORY_SAMPLE_RATE_HZ
                      ) -> Trajectory:
    """Seeded smooth random path inside the room.

    Draws one waypoint per ~2 s of duration uniformly inside the room
    shrunk by ``margin_m``, interpolates with a clamped cubic spline
    (zero velocity at both ends), then contracts the whole path toward the
    waypoint centroid just enough to respect the speed cap and the margin
    box.  Contraction is exact: positions and velocities scale linearly,
    so one pass suffices.

    Args:
        room_dims_m: (Lx, Ly, Lz) of the room.
        duration_s: flight duration, > 0.
        speed_cap_mps: hard bound on |velocity|, > 0.
        seed: anything ``numpy.random.default_rng`` accepts.
        margin_m: clearance kept from every wall.
        sample_rate_hz: output sample rate.

    Returns:
        Trajectory sampled on [0, duration_s].
    """
    room = np.asarray(room_dims_m, dtype=np.float64)
    if room.shape != (3,) or not np.all(room > 0):
        raise ArgumentError("room_dims_m must be three positive lengths")
    if not (math.isfinite(duration_s) and duration_s > 0):
        raise ArgumentError("duration_s must be positive")
    if not (math.isfinite(speed_cap_mps) and speed_cap_mps > 0):
        raise ArgumentError("speed_cap_mps must be positive")
    if not (math.isfinite(margin_m) and margin_m >= 0):
        raise ArgumentError("margin_m must be >= 0")
    if np.any(room <= 2.0 * margin_m):
        raise ConfigurationError(
            f"room too small for a {margin_m} m trajectory margin")
    if not (math.isfinite(sample_rate_hz) and sample_rate_hz > 0):
        raise ArgumentError("sample_rate_hz must be positive")

    rng = np.random.default_rng(seed)
    n_wp = max(2, int(round(duration_s / 2.0)) + 1)
    wp_t = np.linspace(0.0, duration_s, n_wp)
    lo, hi = margin_m, room - margin_m
    waypoints = lo + rng.random((n_wp, 3)) * (hi - lo)

    spline = CubicSpline(wp_t, waypoints, axis=0, bc_type="clamped")
    n = max(2, int(round(duration_s * sample_rate_hz)) + 1)
    t = np.linspace(0.0, duration_s, n)
    pos = spline(t)
    vel = spline(t, 1)
    center = waypoints.mean(axis=0)

    vmax = float(np.max(np.linalg.norm(vel, axis=1)))
    if vmax > 0.999 * speed_cap_mps:
        alpha = 0.999 * speed_cap_mps / vmax
        pos = center + alpha * (pos - center)
        vel = alpha * vel

    # Clamped splines can overshoot the waypoint box; contract once more so
    # every sample respects the margin (this can only lower speeds).
    beta = 1.0
    for bound, over in ((hi, pos > hi), (lo, pos < lo)):
        if np.any(over):
            need = (np.broadcast_to(bound, pos.shape)[over]
                    - np.broadcast_to(center, pos.shape)[over])
            have = pos[over] - np.broadcast_to(center, pos.shape)[over]
            beta = min(beta, 0.999 * float(np.min(need / have)))
    if beta < 1.0:
        pos = center + beta * (pos - center)
        vel = beta * vel

    return Trajectory(t, pos, vel)


@dataclass(frozen=True, eq=False)
class TrajectorySource:
    """Recipe for the flight path: seeded random, or explicit samples.

    Use the :meth:`random` / :meth:`from_samples` constructors.
    """

    kind: str
    duration_s: float | None = None
    speed_cap_mps: float | None = None
    margin_m: float = DEFAULT_TRAJECTORY_MARGIN_M
    seed: int | None = None
    samples: Trajectory | None = None

    def __post_init__(self):
        if self.kind == "random":
            if self.samples is not None:
                raise ValidationError(
                    "random trajectories must not carry samples",
                    field="trajectory")
            if not (self.duration_s is not None
                    and math.isfinite(self.duration_s)
                    and self.duration_s > 0):
                raise ValidationError("must be positive",
                                      field="trajectory.duration_s")
            if not (self.speed_cap_mps is not None
                    and math.isfinite(self.speed_cap_mps)
                    and self.speed_cap_mps > 0):
                raise ValidationError("must be positive",
                                      field="trajectory.speed_cap_mps")
            if not (math.isfinite(self.margin_m) and self.margin_m >= 0):
                raise ValidationError("must be >= 0",
                                      field="trajectory.margin_m")
            if self.seed is not None and not _is_int(self.seed):
                raise ValidationError("must be an integer or null",
                                      field="trajectory.seed")
        elif self.kind == "samples":
            if self.samples is None:
                raise ValidationError("sample arrays required",
                                      field="trajectory")
        else:
            raise ValidationError("must be 'random' or 'samples'",
                                  field="trajectory.kind")

    @classmethod
    def random(cls, duration_s: float, speed_cap_mps: float,
               margin_m: float = DEFAULT_TRAJECTORY_MARGIN_M,
               seed: int | None = None) -> "TrajectorySource":
        """A path regenerated from a seed each time it is realized.

        With ``seed=None`` the realizing caller supplies the seed, so
        Monte-Carlo trials each fly a fresh path.
        """
        return cls("random", duration_s=float(duration_s),
                   speed_cap_mps=float(speed_cap_mps),
                   margin_m=float(margin_m),
                   seed=None if seed is None else int(seed))

    @classmethod
    def from_samples(cls, trajectory: Trajectory) -> "TrajectorySource":
        """A fixed, fully specified path."""
        return cls("samples", samples=trajectory)

    def __eq__(self, other):
        if not isinstance(other, TrajectorySource):
            return NotImplemented
        return (self.kind == other.kind
                and self.duration_s == other.duration_s
                and self.speed_cap_mps == other.speed_cap_mps
                and self.margin_m == other.margin_m
                and self.seed == other.seed
                and self.samples == other.samples)

    @property
    def span_s(self) -> float:
        """Duration of the realized trajectory."""
        if self.kind == "random":
            return float(self.duration_s)
        return self.samples.duration_s

    def realize(self, room_dims_m, fallback_seed=None) -> Trajectory:
        """Produce the concrete trajectory.

        Args:
            room_dims_m: room box for the random generator.
            fallback_seed: seed used when the source does not pin one.
        """
        if self.kind == "samples":
            return self.samples
        seed = self.seed if self.seed is not None else fallback_seed
        return random_trajectory(room_dims_m, self.duration_s,
                                 self.speed_cap_mps, seed=seed,
                                 margin_m=self.margin_m)


def _is_int(x) -> bool:
    return isinstance(x, numbers.Integral) and not isinstance(x, bool)


def _is_real(x) -> bool:
    return isinstance(x, numbers.Real) and not isinstance(x, bool)


@dataclass(frozen=True, eq=False)
class RoomScenario:
    """Complete, validated description of one experiment.

    Args:
        room_dims_m: room box (Lx, Ly, Lz).
        beacons: receiver positions, inside or on the room boundary.
        clover: transmitter beam arrangement.
        temp_c: air temperature (sets the sound speed).
        channel: multipath/noise/fading settings.
        burst_rate_hz: ranging bursts per second.
        trajectory: flight-path recipe.
        seed: root seed for everything the scenario leaves random.
        height_fix_weight: stage-3 weight of the trilaterated z.
        height_echo_weight: stage-3 weight of the ceiling-echo height.
        echo_jitter_s: Gaussian std of the ceiling-echo round-trip time.
    """

    room_dims_m: tuple = DEFAULT_ROOM_DIMS_M
    beacons: BeaconSet = field(
        default_factory=lambda: BeaconSet(DEFAULT_BEACON_POSITIONS_M))
    clover: CloverConfig = field(default_factory=CloverConfig)
    temp_c: float = DEFAULT_TEMP_C
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    burst_rate_hz: float = DEFAULT_BURST_RATE_HZ
    trajectory: TrajectorySource = field(
        default_factory=lambda: TrajectorySource.random(30.0, 0.5))
    seed: int = 0
    height_fix_weight: float = 0.3
    height_echo_weight: float = 0.7
    echo_jitter_s: float = 1e-5

    def __post_init__(self):
        room = tuple(float(x) for x in self.room_dims_m)
        if len(room) != 3 or not all(math.isfinite(x) and x > 0
                                     for x in room):
            raise ValidationError("must be three positive lengths",
                                  field="room_dims_m")
        object.__setattr__(self, "room_dims_m", room)
        for i, b in enumerate(np.asarray(self.beacons.positions_m)):
            if np.any(b < 0) or np.any(b > np.asarray(room)):
                raise ValidationError(
                    "must lie inside the room or on its boundary",
                    field=f"beacons_m[{i}]")
        if not (math.isfinite(self.temp_c) and self.temp_c > -273.15):
            raise ValidationError("must be above absolute zero",
                                  field="temp_c")
        if not (math.isfinite(self.burst_rate_hz)
                and self.burst_rate_hz > 0):
            raise ValidationError("must be positive", field="burst_rate_hz")
        if not _is_int(self.seed):
            raise ValidationError("must be an integer", field="seed")
        w1, w2 = self.height_fix_weight, self.height_echo_weight
        if w1 < 0 or w2 < 0 or abs(w1 + w2 - 1.0) > 1e-9:
            raise ValidationError(
                "height weights must be >= 0 and sum to 1",
                field="height_fusion")
        if not (math.isfinite(self.echo_jitter_s)
                and self.echo_jitter_s >= 0):
            raise ValidationError("must be >= 0",
                                  field="height_fusion.echo_jitter_s")
        if self.trajectory.kind == "samples":
            pos = self.trajectory.samples.pos_m
            if np.any(pos <= 0) or np.any(pos >= np.asarray(room)):
                raise ValidationError(
                    "positions must stay strictly inside the room",
                    field="trajectory.pos_m")
        elif np.any(np.asarray(room) <= 2.0 * self.trajectory.margin_m):
            raise ValidationError(
                "room too small for the trajectory margin",
                field="trajectory.margin_m")

    def __eq__(self, other):
        if not isinstance(other, RoomScenario):
            return NotImplemented
        return (self.room_dims_m == other.room_dims_m
                and np.array_equal(self.beacons.positions_m,
                                   other.beacons.positions_m)
                and self.clover == other.clover
                and self.temp_c == other.temp_c
                and self.channel == other.channel
                and self.burst_rate_hz == other.burst_rate_hz
                and self.trajectory == other.trajectory
                and self.seed == other.seed
                and self.height_fix_weight == other.height_fix_weight
                and self.height_echo_weight == other.height_echo_weight
                and self.echo_jitter_s == other.echo_jitter_s)

    def sound_speed(self) -> SoundSpeed:
        """Speed of sound at the scenario temperature."""
        return sound_speed_from_temperature(self.temp_c)


def default_scenario(seed: int = 0, duration_s: float = 30.0,
                     speed_cap_mps: float = 0.5) -> RoomScenario:
    """The stock 5 x 5 x 3 m office room with four wall beacons."""
    return RoomScenario(
        trajectory=TrajectorySource.random(duration_s, speed_cap_mps),
        seed=seed)


# --------------------------------------------------------------------------
# Serialization

_TOP_KEYS = ("room_dims_m", "beacons_m", "clover", "temp_c", "channel",
             "burst_rate_hz", "trajectory", "seed", "height_fusion")
_CLOVER_KEYS = ("facings", "half_angle_deg")
_CHANNEL_KEYS = ("snr_db", "max_reflection_order", "wall_reflection_loss",
                 "fading", "seed")
_HEIGHT_KEYS = ("fix_weight", "echo_weight", "echo_jitter_s")
_TRAJ_RANDOM_KEYS = ("kind", "duration_s", "speed_cap_mps", "margin_m",
                     "seed")
_TRAJ_SAMPLE_KEYS = ("kind", "t_s", "pos_m", "vel_mps")


def scenario_to_dict(scenario: RoomScenario) -> dict:
    """Plain-JSON-types view of a scenario (the file format's shape)."""
    src = scenario.trajectory
    if src.kind == "random":
        traj = {"kind": "random", "duration_s": src.duration_s,
                "speed_cap_mps": src.speed_cap_mps,
                "margin_m": src.margin_m, "seed": src.seed}
    else:
        traj = {"kind": "samples",
                "t_s": src.samples.t_s.tolist(),
                "pos_m": src.samples.pos_m.tolist(),
                "vel_mps": src.samples.vel_mps.tolist()}
    return {
        "room_dims_m": list(scenario.room_dims_m),
        "beacons_m": np.asarray(scenario.beacons.positions_m).tolist(),
        "clover": {"facings": [list(f) for f in scenario.clover.facings],
                   "half_angle_deg": scenario.clover.half_angle_deg},
        "temp_c": scenario.temp_c,
        "channel": {"snr_db": scenario.channel.snr_db,
                    "max_reflection_order":
                        scenario.channel.max_reflection_order,
                    "wall_reflection_loss":
                        scenario.channel.wall_reflection_loss,
                    "fading": scenario.channel.fading,
                    "seed": scenario.channel.seed},
        "burst_rate_hz": scenario.burst_rate_hz,
        "trajectory": traj,
        "seed": scenario.seed,
        "height_fusion": {"fix_weight": scenario.height_fix_weight,
                          "echo_weight": scenario.height_echo_weight,
                          "echo_jitter_s": scenario.echo_jitter_s},
    }


def _reject_unknown(obj: dict, allowed, where: str) -> None:
    for key in obj:
        if key not in allowed:
            prefix = f"{where}." if where else ""
            raise ValidationError("unknown field", field=f"{prefix}{key}")


def _want_real(obj: dict, key: str, default, where: str = "") -> float:
    val = obj.get(key, default)
    if not _is_real(val):
        prefix = f"{where}." if where else ""
        raise ValidationError("must be a number", field=f"{prefix}{key}")
    return float(val)


def _want_vec3_list(val, where: str) -> list:
    if not isinstance(val, list):
        raise ValidationError("must be a list of [x, y, z] rows",
                              field=where)
    rows = []
    for i, row in enumerate(val):
        if (not isinstance(row, list) or len(row) != 3
                or not all(_is_real(x) for x in row)):
            raise ValidationError("must be a numeric 3-vector",
                                  field=f"{where}[{i}]")
        rows.append([float(x) for x in row])
    return rows


def validate_scenario(data: dict) -> RoomScenario:
    """Build a RoomScenario from the file format's dict shape.

    Every field is optional; defaults fill the gaps.  Unknown keys and
    invariant violations raise :class:`ValidationError` naming the field.
    """
    if not isinstance(data, dict):
        raise ValidationError("scenario file must hold a JSON object",
                              field="")
    _reject_unknown(data, _TOP_KEYS, "")

    room = data.get("room_dims_m", list(DEFAULT_ROOM_DIMS_M))
    if (not isinstance(room, list) or len(room) != 3
            or not all(_is_real(x) for x in room)):
        raise ValidationError("must be [Lx, Ly, Lz]", field="room_dims_m")

    beacons_raw = data.get("beacons_m")
    if beacons_raw is None:
        beacon_rows = [list(b) for b in DEFAULT_BEACON_POSITIONS_M]
    else:
        beacon_rows = _want_vec3_list(beacons_raw, "beacons_m")
    if len(beacon_rows) < 4:
        raise ValidationError("at least four beacons required",
                              field="beacons_m")

    clover_raw = data.get("clover", {})
    if not isinstance(clover_raw, dict):
        raise ValidationError("must be an object", field="clover")
    _reject_unknown(clover_raw, _CLOVER_KEYS, "clover")
    facings_raw = clover_raw.get("facings")
    if facings_raw is None:
        facings = DEFAULT_CLOVER_FACINGS
    else:
        facings = tuple(tuple(f) for f in
                        _want_vec3_list(facings_raw, "clover.facings"))
    clover = CloverConfig(facings,
                          _want_real(clover_raw, "half_angle_deg", 60.0,
                                     "clover"))

    temp_c = _want_real(data, "temp_c", DEFAULT_TEMP_C)

    chan_raw = data.get("channel", {})
    if not isinstance(chan_raw, dict):
        raise ValidationError("must be an object", field="channel")
    _reject_unknown(chan_raw, _CHANNEL_KEYS, "channel")
    order = chan_raw.get("max_reflection_order", 1)
    if not _is_int(order) or order not in (0, 1, 2):
        raise ValidationError("must be 0, 1 or 2",
                              field="channel.max_reflection_order")
    fading = chan_raw.get("fading", FADING_RAYLEIGH)
    if fading not in (FADING_NONE, FADING_RAYLEIGH):
        raise ValidationError(
            f"must be {FADING_NONE!r} or {FADING_RAYLEIGH!r}",
            field="channel.fading")
    chan_seed = chan_raw.get("seed", 0)
    if not _is_int(chan_seed):
        raise ValidationError("must be an integer", field="channel.seed")
    loss = _want_real(chan_raw, "wall_reflection_loss", 0.5, "channel")
    if not 0.0 < loss <= 1.0:
        raise ValidationError("must lie in (0, 1]",
                              field="channel.wall_reflection_loss")
    snr_db = _want_real(chan_raw, "snr_db", 20.0, "channel")
    if math.isnan(snr_db):
        raise ValidationError("must not be NaN", field="channel.snr_db")
    channel = ChannelConfig(snr_db=snr_db, max_reflection_order=int(order),
                            wall_reflection_loss=loss, fading=fading,
                            seed=int(chan_seed))

    traj_raw = data.get("trajectory",
                        {"kind": "random", "duration_s": 30.0,
                         "speed_cap_mps": 0.5})
    if not isinstance(traj_raw, dict):
        raise ValidationError("must be an object", field="trajectory")
    kind = traj_raw.get("kind")
    if kind == "random":
        _reject_unknown(traj_raw, _TRAJ_RANDOM_KEYS, "trajectory")
        tseed = traj_raw.get("seed")
        if tseed is not None and not _is_int(tseed):
            raise ValidationError("must be an integer or null",
                                  field="trajectory.seed")
        source = TrajectorySource(
            "random",
            duration_s=_want_real(traj_raw, "duration_s", 30.0,
                                  "trajectory"),
            speed_cap_mps=_want_real(traj_raw, "speed_cap_mps", 0.5,
                                     "trajectory"),
            margin_m=_want_real(traj_raw, "margin_m",
                                DEFAULT_TRAJECTORY_MARGIN_M, "trajectory"),
            seed=None if tseed is None else int(tseed))
    elif kind == "samples":
        _reject_unknown(traj_raw, _TRAJ_SAMPLE_KEYS, "trajectory")
        t_raw = traj_raw.get("t_s")
        if (not isinstance(t_raw, list) or not t_raw
                or not all(_is_real(x) for x in t_raw)):
            raise ValidationError("must be a list of times",
                                  field="trajectory.t_s")
        pos = _want_vec3_list(traj_raw.get("pos_m"), "trajectory.pos_m")
        vel = _want_vec3_list(traj_raw.get("vel_mps"), "trajectory.vel_mps")
        source = TrajectorySource.from_samples(
            Trajectory(np.asarray(t_raw, dtype=np.float64),
                       np.asarray(pos, dtype=np.float64),
                       np.asarray(vel, dtype=np.float64)))
    else:
        raise ValidationError("must be 'random' or 'samples'",
                              field="trajectory.kind")

    seed = data.get("seed", 0)
    if not _is_int(seed):
        raise ValidationError("must be an integer", field="seed")

    height_raw = data.get("height_fusion", {})
    if not isinstance(height_raw, dict):
        raise ValidationError("must be an object", field="height_fusion")
    _reject_unknown(height_raw, _HEIGHT_KEYS, "height_fusion")

    return RoomScenario(
        room_dims_m=tuple(float(x) for x in room),
        beacons=BeaconSet(beacon_rows),
        clover=clover,
        temp_c=temp_c,
        channel=channel,
        burst_rate_hz=_want_real(data, "burst_rate_hz",
                                 DEFAULT_BURST_RATE_HZ),
        trajectory=source,
        seed=int(seed),
        height_fix_weight=_want_real(height_raw, "fix_weight", 0.3,
                                     "height_fusion"),
        height_echo_weight=_want_real(height_raw, "echo_weight", 0.7,
                                      "height_fusion"),
        echo_jitter_s=_want_real(height_raw, "echo_jitter_s", 1e-5,
                                 "height_fusion"))


def load_scenario(path) -> RoomScenario:
    """Read and validate a scenario file.

    Raises:
        ParseError: malformed JSON (message carries line and column).
        ValidationError: structurally valid file violating an invariant.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: "
                         f"{exc.msg}") from exc
    return validate_scenario(data)


def save_scenario(scenario: RoomScenario, path) -> None:
    """Write a scenario file that loads back equal field-for-field."""
    text = json.dumps(scenario_to_dict(scenario), indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")
