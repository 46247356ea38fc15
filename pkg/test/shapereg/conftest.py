import pytest
from shapes import blob_points, bumped

from shapereg.geometry import PointCloud


@pytest.fixture
def blob():
    return PointCloud(blob_points())


@pytest.fixture
def shapes():
    """Eight corresponded variants of the blob."""
    base = blob_points(120)
    return [PointCloud(bumped(base, 2.0 + 0.5 * s, seed=s)) for s in range(8)]
