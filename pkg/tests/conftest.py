import os

import numpy as np
import pytest
from scipy import ndimage

from stackguide.raster import GeoImage, GeoTransform, TargetAnnotation
from stackguide.scene import SceneConfig, write_stack


@pytest.fixture(autouse=True)
def temp_guide_data_dir(monkeypatch, tmpdir):
    monkeypatch.setenv('GUIDE_DATA_DIR', os.path.join(tmpdir, 'guide'))


@pytest.fixture
def small_scene():
    return SceneConfig(size=128, octaves=3, roads=2, fields=6, seed=3)


@pytest.fixture
def stack_file(tmp_path, small_scene):
    """two acquisitions of a small procedural scene"""
    return write_stack(small_scene, [('A', 'base'), ('B', 'snow')], tmp_path / 'stack')


@pytest.fixture
def textured():
    """one 96x96 textured image with the target near its centre"""
    rng = np.random.default_rng(0)
    pixels = ndimage.gaussian_filter(rng.random((96, 96)), 1.5)
    pixels = (pixels - pixels.min()) / (pixels.max() - pixels.min())
    img = GeoImage(pixels=pixels, geo=GeoTransform(), image_id='a')
    target = TargetAnnotation(world_position=(48.0, 47.0), per_image_pixel={'a': (48.0, 47.0)})
    return img, target
