import numpy as np
import pytest

from bronchosim.airway import AirwayGeometry, Scenario, build_airway
from bronchosim.config import StackConfig


@pytest.fixture(scope="session")
def standard_airway():
    return build_airway("standard", 0)


@pytest.fixture(scope="session")
def constrained_airway():
    return build_airway("constrained", 0)


@pytest.fixture()
def cfg():
    return StackConfig()


def straight_tube_airway(radius: float = 9.0, length: float = 120.0) -> AirwayGeometry:
    """Straight capped tube: the flat end-cap test geometry for rendering."""
    n = int(length) + 1
    pts = np.zeros((n, 3))
    pts[:, 2] = np.arange(n, dtype=float)
    geo = AirwayGeometry(
        scenario=Scenario.STANDARD,
        seed=0,
        centerline=pts,
        radius_profile=np.full(n, radius),
        arclength=np.arange(n, dtype=float),
        carina_arclength=float(length),
        glottis_arclength=length / 2.0,
        branches=[],
        params={"sample_spacing": 1.0, "max_centerline_curvature": 0.0},
    )
    geo._build_tables()
    geo._check_invariants()
    return geo


def centerline_pose(geo: AirwayGeometry, carina_distance: float):
    """Camera pose on the main centerline aligned with the local tangent."""
    s = geo.carina_arclength - carina_distance
    i = int(np.searchsorted(geo.arclength, s))
    p = geo.centerline[i].astype(float)
    tangent = geo.centerline[min(i + 1, len(geo.centerline) - 1)] - geo.centerline[max(i - 1, 0)]
    tangent = tangent / np.linalg.norm(tangent)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, tangent)
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        return p, np.array([1.0, 0.0, 0.0, 0.0])
    axis /= norm
    angle = float(np.arccos(np.clip(z @ tangent, -1.0, 1.0)))
    return p, np.concatenate([[np.cos(angle / 2.0)], np.sin(angle / 2.0) * axis])
