import numpy as np
import pytest

from echoloc.channel import sound_speed_from_temperature
from echoloc.localization import BeaconSet

# Default receiver layout used throughout: one beacon per wall at varied
# heights, matching echoloc.localization.DEFAULT_BEACON_POSITIONS_M.
BEACONS = ((2.5, 0.0, 1.5), (5.0, 2.5, 2.5), (2.5, 5.0, 2.0), (0.0, 5.0, 3.0))
ROOM = (5.0, 5.0, 3.0)


@pytest.fixture(scope="session")
def c20():
    """Sound speed at the default 20 C."""
    return sound_speed_from_temperature(20.0)


@pytest.fixture(scope="session")
def beacons():
    return BeaconSet(BEACONS)


def exact_distances(point, positions=BEACONS):
    """Brute-force Euclidean distances, the trilateration oracle."""
    p = np.asarray(point, dtype=np.float64)
    return [float(np.linalg.norm(p - np.asarray(b))) for b in positions]
