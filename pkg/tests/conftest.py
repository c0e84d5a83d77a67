import numpy as np
import pytest
from hypothesis import settings

from lod2rect.geodata import GeoTransform, Grid

settings.register_profile("repo", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("repo")


def make_transform(rows=64, gsd=0.5, x0=1000.0, y0=2000.0):
    """North-up transform whose lower-left corner is (x0, y0)."""
    return GeoTransform(x0, y0 + rows * gsd, gsd, -gsd)


def grid(values, kind="dsm", gsd=0.5, nodata=None, x0=1000.0, y0=2000.0):
    values = np.asarray(values)
    if nodata is None and kind == "dsm":
        nodata = -9999.0
    return Grid(values, make_transform(values.shape[0], gsd, x0, y0), nodata=nodata, kind=kind)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
