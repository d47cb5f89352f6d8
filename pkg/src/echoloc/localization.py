"""Position solving from per-beacon distances, plus geometry quality.

Trilateration linearizes the squared-range equations against the last
beacon and solves the resulting least-squares problem; dilution of
precision (DOP) summarizes how beacon geometry stretches ranging noise
into position noise; the height stage replaces the weak vertical axis
with a ceiling-echo measurement.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from .channel import SoundSpeed
from .errors import ArgumentError, EchoInconsistencyError, GeometryError

# Beacon layout used by the stock scenario: four wall-mounted receivers at
# mixed heights (the uneven heights are what keep the geometry non-coplanar).
DEFAULT_BEACON_POSITIONS_M: tuple[tuple[float, float, float], ...] = (
    (2.5, 0.0, 1.5), (5.0, 2.5, 2.5), (2.5, 5.0, 2.0), (0.0, 5.0, 3.0))

_SINGULAR_COND = 1e8


class Stage(IntEnum):
    """Pipeline stage that produced a fix."""

    STAGE1 = 1   # raw TOA distances
    STAGE2 = 2   # Kalman-fused distances
    STAGE3 = 3   # stage 2 plus ceiling-echo height fusion


@dataclass(frozen=True, eq=False)
class BeaconSet:
    """Positions of the fixed receivers, one row per beacon (n >= 4)."""

    positions_m: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions_m, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ArgumentError("positions_m must have shape (n, 3)")
        if pos.shape[0] < 4:
            raise ArgumentError("at least 4 beacons are required")
        if not np.all(np.isfinite(pos)):
            raise ArgumentError("beacon positions must be finite")
        object.__setattr__(self, "positions_m", pos)

    def __len__(self) -> int:
        return int(self.positions_m.shape[0])

    def linearization_matrix(self) -> np.ndarray:
        """The geometry matrix A with rows 2*(b_ref - b_i), ref = last beacon."""
        ref = self.positions_m[-1]
        return 2.0 * (ref - self.positions_m[:-1])

    def _linearization_qr(self):
        """Memoized QR of the linearization matrix (positions are frozen).

        Also carries the squared beacon norms, which the trilateration
        right-hand side needs on every solve.
        """
        cached = getattr(self, "_qr_cache", None)
        if cached is None:
            a_mat = self.linearization_matrix()
            q_mat, r_mat = np.linalg.qr(a_mat)
            sq = np.sum(self.positions_m ** 2, axis=1)
            cached = (a_mat, q_mat, r_mat, sq)
            object.__setattr__(self, "_qr_cache", cached)
        return cached

    def check_geometry(self) -> None:
        """Raise GeometryError when the beacons are (nearly) coplanar.

        Checked at use rather than construction so degenerate sets can
        still be built to demonstrate the failure modes.
        """
        s = np.linalg.svd(self.linearization_matrix(), compute_uv=False)
        if s[0] <= 0 or s[-1] / s[0] < 1e-9:
            raise GeometryError(
                "beacons are coplanar/collinear; the linearized system is "
                "rank deficient")


def categorize_dop(value: float) -> str:
    """Qualitative rating of a DOP value.

    Below 1 suggests the solution is over-determined relative to the noise
    model ("measurement_error_or_redundancy"); exactly 1 is ideal; then
    (1, 2] very good, (2, 5] good, (5, 10] medium, (10, 20] sufficient and
    anything above 20 bad.
    """
    if not math.isfinite(value) or value < 0:
        raise ArgumentError("DOP value must be finite and >= 0")
    if value < 1.0:
        return "measurement_error_or_redundancy"
    if value == 1.0:
        return "ideal"
    for bound, name in ((2.0, "very_good"), (5.0, "good"),
                        (10.0, "medium"), (20.0, "sufficient")):
        if value <= bound:
            return name
    return "bad"


@dataclass(frozen=True)
class DopValues:
    """Dilution-of-precision triple at a point.

    ``gdop**2 == hdop**2 + vdop**2`` by construction; ``category`` rates
    the GDOP.
    """

    gdop: float
    hdop: float
    vdop: float
    category: str

    def __post_init__(self):
        for name in ("gdop", "hdop", "vdop"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ArgumentError(f"{name} must be finite and >= 0")


def compute_dop(beacons: BeaconSet, point_m) -> DopValues:
    """DOP values at a point from unit direction cosines to each beacon.

    Builds C with rows (b_i - p)/|b_i - p| and inverts C^T C; HDOP gathers
    the two horizontal diagonal entries, VDOP the vertical one, and
    GDOP = sqrt(HDOP^2 + VDOP^2).

    Raises:
        GeometryError: the point coincides with a beacon, or the direction
            matrix is singular (e.g. all beacons coplanar with z).
    """
    p = np.asarray(point_m, dtype=np.float64)
    if p.shape != (3,):
        raise ArgumentError("point_m must be a length-3 vector")
    diff = beacons.positions_m - p
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    if np.any(dist < 1e-9):
        raise GeometryError("point coincides with a beacon; directions are "
                            "singular")
    cosines = diff / dist[:, None]
    normal = cosines.T @ cosines
    # normal is symmetric PSD, so its eigenvalue ratio equals the SVD
    # condition number; eigvalsh on a 3x3 is much cheaper than cond().
    eig = np.linalg.eigvalsh(normal)
    if eig[0] <= 0 or eig[-1] / eig[0] > _SINGULAR_COND:
        raise GeometryError("beacon directions are singular at this point")
    n00, n01, n02 = normal[0]
    n11, n12 = normal[1, 1], normal[1, 2]
    n22 = normal[2, 2]
    det = (n00 * (n11 * n22 - n12 * n12)
           - n01 * (n01 * n22 - n12 * n02)
           + n02 * (n01 * n12 - n11 * n02))
    inv00 = (n11 * n22 - n12 * n12) / det
    inv11 = (n00 * n22 - n02 * n02) / det
    inv22 = (n00 * n11 - n01 * n01) / det
    hdop = math.sqrt(inv00 + inv11)
    vdop = math.sqrt(inv22)
    gdop = math.sqrt(hdop ** 2 + vdop ** 2)
    return DopValues(gdop, hdop, vdop, categorize_dop(gdop))


@dataclass(frozen=True, eq=False)
class PositionFix:
    """A solved position.

    Args:
        xyz_m: estimated position.
        stage: which pipeline stage produced it.
        residual_m: least-squares residual |Ax - b|.
        dop: DOP at the solved point, or None when the local geometry was
            singular there.
    """

    xyz_m: np.ndarray
    stage: Stage
    residual_m: float
    dop: DopValues | None

    def __post_init__(self):
        xyz = np.asarray(self.xyz_m, dtype=np.float64)
        if xyz.shape != (3,):
            raise ArgumentError("xyz_m must be a length-3 vector")
        if not np.all(np.isfinite(xyz)):
            raise ArgumentError("xyz_m must be finite")
        if not self.residual_m >= 0:
            raise ArgumentError("residual_m must be >= 0")
        object.__setattr__(self, "xyz_m", xyz)
        object.__setattr__(self, "stage", Stage(self.stage))


def trilaterate(beacons: BeaconSet, distances_m) -> PositionFix:
    """Solve a position from >= 4 beacon distances.

    Subtracting the last beacon's squared-range equation from the others
    gives the linear system ``A x = b`` with rows
    ``A_i = 2*(b_ref - b_i)`` and
    ``b_i = d_i^2 - d_ref^2 - |b_i|^2 + |b_ref|^2``, solved by QR (which
    matches the classical normal-equations solution on well-conditioned
    geometry but avoids squaring the condition number).

    Args:
        beacons: beacon positions (n >= 4).
        distances_m: one positive distance per beacon.

    Returns:
        PositionFix at stage 1 carrying the residual and the DOP at the
        solved point (None when the DOP itself is singular there).

    Raises:
        GeometryError: rank-deficient geometry (coplanar beacons).
    """
    d = np.asarray(distances_m, dtype=np.float64)
    if d.ndim != 1 or d.size != len(beacons):
        raise ArgumentError(
            f"expected {len(beacons)} distances, got {d.size}")
    if not np.all(np.isfinite(d)) or not np.all(d > 0):
        raise ArgumentError("distances must be finite and > 0")

    a_mat, q_mat, r_mat, sq = beacons._linearization_qr()
    b_vec = d[:-1] ** 2 - d[-1] ** 2 - sq[:-1] + sq[-1]

    diag = np.abs(np.diag(r_mat))
    if diag.min() < 1e-9 * max(diag.max(), 1.0):
        raise GeometryError("beacons are coplanar/collinear; the linearized "
                            "system is rank deficient")
    y0, y1, y2 = q_mat.T @ b_vec
    x2 = y2 / r_mat[2, 2]
    x1 = (y1 - r_mat[1, 2] * x2) / r_mat[1, 1]
    x0 = (y0 - r_mat[0, 1] * x1 - r_mat[0, 2] * x2) / r_mat[0, 0]
    xyz = np.array([x0, x1, x2])
    residual = float(np.linalg.norm(a_mat @ xyz - b_vec))
    try:
        dop = compute_dop(beacons, xyz)
    except GeometryError:
        dop = None
    return PositionFix(xyz, Stage.STAGE1, residual, dop)


# --------------------------------------------------------------------------
# height from the ceiling echo

@dataclass(frozen=True)
class HeightMeasurement:
    """Drone height derived from an upward ultrasonic round trip.

    ``h_prime_m`` is the distance to the ceiling (c*t/2) and
    ``drone_height_m = ceiling_height_m - h_prime_m``.
    """

    round_trip_s: float
    ceiling_height_m: float
    h_prime_m: float
    drone_height_m: float

    def __post_init__(self):
        if not (0.0 <= self.drone_height_m <= self.ceiling_height_m):
            raise EchoInconsistencyError(
                "drone height outside [0, ceiling]; echo is inconsistent")


def height_from_echo(round_trip_s: float,
                     ceiling_height_m: float,
                     c: SoundSpeed) -> HeightMeasurement:
    """Convert an upward echo round trip into a drone height.

    Args:
        round_trip_s: two-way travel time of the ceiling echo, >= 0.
        ceiling_height_m: room height H, > 0.
        c: speed of sound.

    Raises:
        EchoInconsistencyError: the echo implies a height outside [0, H].
    """
    if not (math.isfinite(round_trip_s) and round_trip_s >= 0):
        raise ArgumentError("round_trip_s must be finite and >= 0")
    if not ceiling_height_m > 0:
        raise ArgumentError("ceiling_height_m must be positive")
    h_prime = c.value_mps * round_trip_s / 2.0
    return HeightMeasurement(round_trip_s, ceiling_height_m, h_prime,
                             ceiling_height_m - h_prime)


def fuse_height(fix: PositionFix,
                height: HeightMeasurement,
                w1: float = 0.3,
                w2: float = 0.7) -> PositionFix:
    """Blend the trilaterated z with the echo-derived height.

    The fused fix keeps x and y and replaces z with
    ``w1 * z + w2 * drone_height`` where the weights are convex
    (w1 + w2 = 1, both >= 0).  The vertical axis is the weak one for
    wall-mounted beacons, hence the default tilt toward the echo.

    Args:
        fix: a stage-1 or stage-2 fix.
        height: the ceiling-echo measurement.
        w1: weight of the trilaterated z (default 0.3).
        w2: weight of the echo height (default 0.7).

    Returns:
        A stage-3 PositionFix (residual and DOP carried over).
    """
    if w1 < 0 or w2 < 0 or abs(w1 + w2 - 1.0) > 1e-9:
        raise ArgumentError("weights must be >= 0 and sum to 1")
    z = w1 * fix.xyz_m[2] + w2 * height.drone_height_m
    xyz = np.array([fix.xyz_m[0], fix.xyz_m[1], z])
    return replace(fix, xyz_m=xyz, stage=Stage.STAGE3)


# --------------------------------------------------------------------------
# DOP maps

@dataclass(frozen=True, eq=False)
class DopGrid:
    """DOP evaluated at the cell centers of a room lattice.

    Arrays are indexed [ix, iy, iz]; ``singular`` marks cells whose
    direction geometry was unusable (DOP entries are NaN there).
    """

    x_centers_m: np.ndarray
    y_centers_m: np.ndarray
    z_centers_m: np.ndarray
    hdop: np.ndarray
    vdop: np.ndarray
    gdop: np.ndarray
    singular: np.ndarray
    resolution_m: float

    def mean_hdop(self) -> float:
        return float(np.mean(self.hdop[~self.singular]))

    def mean_vdop(self) -> float:
        return float(np.mean(self.vdop[~self.singular]))

    def iter_rows(self):
        """Yield (x, y, z, hdop, vdop, gdop, singular) row-major (z fastest)."""
        for i, x in enumerate(self.x_centers_m):
            for j, y in enumerate(self.y_centers_m):
                for k, z in enumerate(self.z_centers_m):
                    yield (float(x), float(y), float(z),
                           float(self.hdop[i, j, k]),
                           float(self.vdop[i, j, k]),
                           float(self.gdop[i, j, k]),
                           bool(self.singular[i, j, k]))


def dop_grid(beacons: BeaconSet, room_dims_m,
             resolution_m: float) -> DopGrid:
    """Evaluate DOP over a lattice of cell centers spanning the room.

    Each axis is split into ``max(2, round(L / resolution))`` cells; the
    sample point of a cell is its center.  Cells where the geometry is
    singular (point on a beacon, or condition number of C^T C above 1e8)
    are flagged instead of raising.

    Args:
        beacons: beacon positions.
        room_dims_m: room extents (Lx, Ly, Lz).
        resolution_m: requested cell edge length, > 0.
    """
    room = np.asarray(room_dims_m, dtype=np.float64)
    if room.shape != (3,) or not np.all(room > 0):
        raise ArgumentError("room_dims_m must be three positive extents")
    if not resolution_m > 0:
        raise ArgumentError("resolution_m must be positive")
    counts = [max(2, int(round(dim / resolution_m))) for dim in room]
    centers = [(np.arange(n) + 0.5) * dim / n
               for n, dim in zip(counts, room)]

    xs, ys, zs = np.meshgrid(*centers, indexing="ij")
    pts = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
    diff = beacons.positions_m[None, :, :] - pts[:, None, :]
    dist = np.linalg.norm(diff, axis=2)
    too_close = np.any(dist < 1e-9, axis=1)
    dist = np.where(dist < 1e-9, 1.0, dist)
    cosines = diff / dist[:, :, None]
    normal = np.einsum("pbi,pbj->pij", cosines, cosines)

    singular = too_close | (np.linalg.cond(normal) > _SINGULAR_COND)
    normal[singular] = np.eye(3)
    inv = np.linalg.inv(normal)
    hdop = np.sqrt(inv[:, 0, 0] + inv[:, 1, 1])
    vdop = np.sqrt(inv[:, 2, 2])
    gdop = np.sqrt(hdop ** 2 + vdop ** 2)
    for arr in (hdop, vdop, gdop):
        arr[singular] = np.nan

    shape = tuple(counts)
    return DopGrid(centers[0], centers[1], centers[2],
                   hdop.reshape(shape), vdop.reshape(shape),
                   gdop.reshape(shape), singular.reshape(shape),
                   float(resolution_m))
