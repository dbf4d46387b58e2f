import numpy as np
import pytest

from agbmap.geodata import GridSpec, Raster


@pytest.fixture
def spec4() -> GridSpec:
    return GridSpec(origin_x=0.0, origin_y=0.0, n_cols=4, n_rows=4, cell_size=30.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def make_raster(spec: GridSpec, values, name: str = "band") -> Raster:
    return Raster(spec, np.asarray(values, dtype=np.float64), name)
