"""
栅格模型、重采样与分块拼接测试
"""
import types

import numpy as np
import pytest
from scipy import ndimage

from conftest import make_texture
from src.core_application.errors import AssemblyError, ConfigurationError, ContractError, GeometryError
from src.core_application.geomest import Homography
from src.core_application.raster import (
    GridLayout, Raster, Tile, partition, rotate90, stitch, to_gray, warp_raster,
)


class TestRaster:

    def test_rejects_non_uint8(self):
        with pytest.raises(ContractError):
            Raster(np.zeros((4, 4), dtype=np.float64))

    def test_rejects_two_channels(self):
        with pytest.raises(ContractError):
            Raster(np.zeros((4, 4, 2), dtype=np.uint8))

    def test_single_channel_axis_is_squeezed(self):
        r = Raster(np.full((3, 5, 1), 7, dtype=np.uint8))
        assert r.channels == 1
        assert r.shape == (5, 3)

    def test_data_is_read_only(self):
        r = Raster.zeros(4, 4)
        with pytest.raises(ValueError):
            r.data[0, 0] = 1
        with pytest.raises(AttributeError):
            r.data = None

    def test_constructor_copies_input(self):
        src = np.zeros((2, 2), dtype=np.uint8)
        r = Raster(src)
        src[0, 0] = 9
        assert r.data[0, 0] == 0

    def test_from_float_rounds_and_clamps(self):
        r = Raster.from_float(np.array([[-3.0, 0.4, 0.6, 254.5, 300.0]]))
        assert r.data.tolist() == [[0, 0, 1, 254, 255]]

    def test_to_gray_uses_luma_weights(self):
        rgb = Raster(np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255]]], dtype=np.uint8))
        np.testing.assert_allclose(to_gray(rgb), [[0.299 * 255, 0.587 * 255, 0.114 * 255]])


class TestPartition:

    def test_exact_division(self):
        img = Raster.zeros(512, 512)
        tiles, layout = partition(img, 256)
        assert [t.origin for t in tiles] == [(0, 0), (256, 0), (0, 256), (256, 256)]
        assert (layout.cols, layout.rows) == (2, 2)

    def test_edge_tiles_keep_true_size(self):
        tiles, _ = partition(Raster.zeros(300, 300), 256)
        assert len(tiles) == 4
        last = {t.origin: t for t in tiles}[(256, 256)]
        assert last.payload.shape == (44, 44)

    def test_single_tile_is_image(self, textured):
        img = Raster(np.pad(textured.data, ((0, 128), (0, 128)), mode="reflect"))
        tiles, _ = partition(img, 256)
        assert len(tiles) == 1
        assert tiles[0].payload == img

    def test_tile_size_below_minimum(self):
        with pytest.raises(ConfigurationError):
            partition(Raster.zeros(64, 64), 31)

    @pytest.mark.parametrize("tile_size", [32, 100, 256])
    def test_round_trip(self, tile_size):
        rng = np.random.default_rng(5)
        img = Raster(rng.integers(0, 256, size=(300, 300), dtype=np.uint8))
        assert stitch(*partition(img, tile_size)) == img

    def test_round_trip_rgb(self, textured_rgb):
        assert stitch(*partition(textured_rgb, 48)) == textured_rgb


class TestStitch:

    def test_quadrant_placement(self):
        layout = GridLayout.for_size(64, 64, 32)
        values = {(0, 0): 10, (32, 0): 20, (0, 32): 30, (32, 32): 40}
        tiles = [Tile(x, y, Raster.full(32, 32, v)) for (x, y), v in values.items()]
        out = stitch(tiles, layout).data
        assert np.all(out[:32, :32] == 10)
        assert np.all(out[:32, 32:] == 20)
        assert np.all(out[32:, :32] == 30)
        assert np.all(out[32:, 32:] == 40)

    def test_missing_tile_names_origin(self):
        tiles, layout = partition(Raster.zeros(512, 512), 256)
        tiles = [t for t in tiles if t.origin != (0, 256)]
        with pytest.raises(AssemblyError, match=r"\(0, 256\)"):
            stitch(tiles, layout)

    def test_duplicate_tile(self):
        tiles, layout = partition(Raster.zeros(64, 64), 32)
        with pytest.raises(AssemblyError, match="Duplicate"):
            stitch(tiles + [tiles[0]], layout)

    def test_wrong_tile_size(self):
        tiles, layout = partition(Raster.zeros(64, 64), 32)
        tiles[1] = Tile(32, 0, Raster.zeros(16, 32))
        with pytest.raises(AssemblyError):
            stitch(tiles, layout)


class TestWarp:

    def test_identity_is_byte_exact(self, textured):
        result = warp_raster(textured, Homography.identity(), textured.width, textured.height)
        assert result.image == textured
        assert np.all(result.validity.data == 255)

    def test_integer_translation(self):
        rng = np.random.default_rng(1)
        src = Raster(rng.integers(1, 256, size=(10, 10), dtype=np.uint8))
        result = warp_raster(src, Homography.translation(3, 0), 10, 10)
        out = result.image.data
        np.testing.assert_array_equal(out[:, 3:], src.data[:, :7])
        assert np.all(out[:, :3] == 0)
        assert np.all(result.validity.data[:, :3] == 0)
        assert np.all(result.validity.data[:, 3:] == 255)

    def test_quarter_rotation_matches_lossless_rotation(self, textured):
        n = textured.width
        c = (n - 1) / 2.0
        result = warp_raster(textured, Homography.rotation_about(90.0, c, c), n, n)
        # 图像坐标系（y 向下）中的 +90° 对应 np.rot90 的顺时针方向
        assert result.image == rotate90(textured, -1)
        assert np.all(result.validity.data == 255)

    def test_rgb_channels_warp_independently(self, textured_rgb):
        result = warp_raster(textured_rgb, Homography.translation(2, 1), 64, 64)
        assert result.image.channels == 3
        np.testing.assert_array_equal(result.image.data[1:, 2:], textured_rgb.data[:-1, :-2])

    def test_singular_matrix(self):
        singular = types.SimpleNamespace(m=np.zeros((3, 3)))
        with pytest.raises(GeometryError):
            warp_raster(Raster.zeros(4, 4), singular, 4, 4)

    def test_output_size_can_differ(self, textured):
        result = warp_raster(textured, Homography.identity(), 200, 50)
        assert result.image.shape == (200, 50)
        assert np.all(result.validity.data[:, 128:] == 0)

    def test_composition_within_one_level(self):
        smooth = make_texture(128, seed=2, sigma=8.0)
        h1 = Homography.rotation_about(5.0, 63.5, 63.5)
        h2 = Homography.translation(3.3, -2.7).compose(Homography.rotation_about(-3.0, 63.5, 63.5))
        first = warp_raster(smooth, h1, 128, 128)
        twice = warp_raster(first.image, h2, 128, 128)
        direct = warp_raster(smooth, h2.compose(h1), 128, 128)
        carried = warp_raster(first.validity, h2, 128, 128).image.data == 255
        valid = (twice.validity.data == 255) & (direct.validity.data == 255) & carried
        valid = ndimage.binary_erosion(valid, iterations=2)
        assert valid.mean() > 0.5
        diff = np.abs(twice.image.data.astype(int) - direct.image.data.astype(int))
        assert diff[valid].max() <= 1


def test_rotate90_full_turn(textured_rgb):
    assert rotate90(textured_rgb, 4) == textured_rgb
    assert rotate90(rotate90(textured_rgb, 1), 3) == textured_rgb
