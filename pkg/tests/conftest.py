from pathlib import Path

import numpy as np
import pytest

from utils.dynamics import make_default_vehicle
from utils.geometry import FreeSpace, InspectionPoint, KeepInCorridor, KeepOutEllipsoid

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

GATEWAY_WAYPOINTS = [
    (0.0, 0.0, 0.0),
    (5.0, 0.0, 0.0),
    (12.2, 2.1, 0.0),
    (18.2, 6.6, 0.0),
    (24.2, 11.1, 4.0),
    (29.0, 14.7, 4.0),
    (35.5472, 16.6096, 4.0),
]
GATEWAY_LENGTH = 41.32


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def vehicle():
    return make_default_vehicle()


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def gateway_points():
    return [InspectionPoint(p, radius=1.0) for p in GATEWAY_WAYPOINTS]


@pytest.fixture
def gateway_keepouts():
    return [
        KeepOutEllipsoid.from_axes((8.0, 1.0, -3.5), (4.0, 1.5, 1.5), name="habitat_A"),
        KeepOutEllipsoid.from_axes((17.3, 1.55, 0.0), (1.5, 1.5, 1.5), name="radiator_B"),
        KeepOutEllipsoid.from_axes((26.6, 12.9, 7.5), (3.0, 3.0, 1.5), name="module_C"),
        KeepOutEllipsoid.from_axes((31.38, 18.73, 4.0), (1.2, 1.2, 1.2), name="antenna_D"),
    ]


@pytest.fixture
def gateway_fs(gateway_points, gateway_keepouts):
    return FreeSpace(KeepInCorridor.from_points(gateway_points), gateway_keepouts, 0.3)


@pytest.fixture
def straight_points():
    return [InspectionPoint((0.0, 0.0, 0.0)), InspectionPoint((1.0, 0.0, 0.0)), InspectionPoint((2.0, 0.0, 0.0))]


@pytest.fixture
def straight_fs(straight_points):
    return FreeSpace(KeepInCorridor.from_points(straight_points), [], 0.3)
