"""
Shared fixtures: textured rasters, synthetic pairs and keypoint helpers
"""
import os
import sys

import numpy as np
import pytest
from scipy import ndimage

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from src.core_application.raster import Raster  # noqa: E402


def make_texture(size: int = 128, seed: int = 0, lo: float = 40.0, hi: float = 200.0, sigma: float = 2.0) -> Raster:
    """平滑噪声纹理，取值范围 [lo, hi]"""
    rng = np.random.default_rng(seed)
    field = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
    field = (field - field.min()) / (field.max() - field.min())
    return Raster.from_float(lo + (hi - lo) * field)


def square_image(size: int = 32, start: int = 10, stop: int = 22, value: int = 255) -> Raster:
    data = np.zeros((size, size), dtype=np.uint8)
    data[start:stop, start:stop] = value
    return Raster(data)


@pytest.fixture
def textured() -> Raster:
    return make_texture(128, seed=3)


@pytest.fixture
def textured_rgb() -> Raster:
    planes = [make_texture(64, seed=s).data for s in (11, 12, 13)]
    return Raster(np.stack(planes, axis=-1))


@pytest.fixture
def out_dir(tmp_path):
    return tmp_path / "out"
