"""
栅格影像模型
Raster model, bilinear warping and tile partition / stitching

负责：
1. 8 位单通道 / 三通道影像的不可变表示
2. 基于单应矩阵的逆向映射双线性重采样（附带有效性掩膜）
3. 大幅影像的分块与拼接
"""
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Iterator, List, Mapping, NamedTuple, Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.core_application.errors import AssemblyError, ConfigurationError, ContractError, GeometryError

if TYPE_CHECKING:
    from src.core_application.geomest import Homography

logger = logging.getLogger(__name__)

MIN_TILE_SIZE = 32
DEFAULT_TILE_SIZE = 256
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
# 有效性判定的浮点容差
PREIMAGE_EPS = 1e-9


class Raster:
    """不可变的 8 位影像，data 形状为 (H, W) 或 (H, W, 3)"""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.dtype != np.uint8:
            raise ContractError(f"Raster samples must be uint8, got {arr.dtype}")
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
            raise ContractError(f"Raster must have 1 or 3 channels, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ContractError(f"Raster dimensions must be >= 1, got {arr.shape[1]}x{arr.shape[0]}")
        arr = np.array(arr, dtype=np.uint8, copy=True, order="C")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Raster is immutable")

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    @property
    def shape(self) -> Tuple[int, int]:
        """(width, height)"""
        return self.width, self.height

    def __eq__(self, other) -> bool:
        if not isinstance(other, Raster):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None

    def __repr__(self) -> str:
        return f"Raster({self.width}x{self.height}x{self.channels})"

    @classmethod
    def zeros(cls, width: int, height: int, channels: int = 1) -> "Raster":
        shape = (height, width) if channels == 1 else (height, width, channels)
        return cls(np.zeros(shape, dtype=np.uint8))

    @classmethod
    def full(cls, width: int, height: int, value: int, channels: int = 1) -> "Raster":
        shape = (height, width) if channels == 1 else (height, width, channels)
        return cls(np.full(shape, value, dtype=np.uint8))

    @classmethod
    def from_float(cls, values: np.ndarray) -> "Raster":
        """四舍五入并截断到 [0, 255]"""
        return cls(np.clip(np.rint(values), 0, 255).astype(np.uint8))


@dataclass(frozen=True)
class Tile:
    origin_x: int
    origin_y: int
    payload: Raster

    @property
    def origin(self) -> Tuple[int, int]:
        return self.origin_x, self.origin_y


@dataclass(frozen=True)
class GridLayout:
    tile_size: int
    cols: int
    rows: int
    parent_width: int
    parent_height: int

    @classmethod
    def for_size(cls, width: int, height: int, tile_size: int) -> "GridLayout":
        return cls(
            tile_size=tile_size,
            cols=math.ceil(width / tile_size),
            rows=math.ceil(height / tile_size),
            parent_width=width,
            parent_height=height,
        )

    def origins(self) -> Iterator[Tuple[int, int]]:
        """行优先遍历所有瓦片原点"""
        for row in range(self.rows):
            for col in range(self.cols):
                yield col * self.tile_size, row * self.tile_size

    def block_size(self, origin_x: int, origin_y: int) -> Tuple[int, int]:
        """边缘瓦片保留真实（更小）的尺寸"""
        return (
            min(self.tile_size, self.parent_width - origin_x),
            min(self.tile_size, self.parent_height - origin_y),
        )


class WarpResult(NamedTuple):
    image: Raster
    validity: Raster


def to_gray(img: Raster) -> np.ndarray:
    """转换为 float64 灰度网格"""
    if img.channels == 1:
        return img.data.astype(np.float64)
    return img.data.astype(np.float64) @ LUMA_WEIGHTS


def warp_raster(src: Raster, h: "Homography", out_width: int, out_height: int) -> WarpResult:
    """
    逆向映射重采样：output(x, y) = bilinear(src, H^-1 · (x, y, 1))

    落在源影像之外的像素填 0，并在有效性掩膜中记为 0（有效为 255）。
    """
    if out_width < 1 or out_height < 1:
        raise ContractError(f"Output dimensions must be >= 1, got {out_width}x{out_height}")
    m = np.asarray(h.m, dtype=np.float64)
    if abs(np.linalg.det(m)) <= 1e-12:
        raise GeometryError("Cannot warp with a singular homography")
    try:
        m_inv = np.linalg.inv(m)
    except np.linalg.LinAlgError as e:
        raise GeometryError(f"Homography inversion failed: {e}") from e

    ys, xs = np.mgrid[0:out_height, 0:out_width].astype(np.float64)
    u = m_inv[0, 0] * xs + m_inv[0, 1] * ys + m_inv[0, 2]
    v = m_inv[1, 0] * xs + m_inv[1, 1] * ys + m_inv[1, 2]
    w = m_inv[2, 0] * xs + m_inv[2, 1] * ys + m_inv[2, 2]

    finite_w = np.abs(w) > 1e-12
    safe_w = np.where(finite_w, w, 1.0)
    sx = u / safe_w
    sy = v / safe_w

    max_x = src.width - 1
    max_y = src.height - 1
    valid = (
        finite_w
        & (sx >= -PREIMAGE_EPS) & (sx <= max_x + PREIMAGE_EPS)
        & (sy >= -PREIMAGE_EPS) & (sy <= max_y + PREIMAGE_EPS)
    )
    coords = np.stack([np.clip(sy, 0, max_y), np.clip(sx, 0, max_x)])

    planes = [src.data] if src.channels == 1 else [src.data[:, :, c] for c in range(3)]
    sampled = []
    for plane in planes:
        values = ndimage.map_coordinates(
            plane.astype(np.float64), coords, order=1, mode="nearest", prefilter=False
        )
        sampled.append(np.where(valid, values, 0.0))
    stacked = sampled[0] if src.channels == 1 else np.stack(sampled, axis=-1)

    image = Raster.from_float(stacked)
    validity = Raster(np.where(valid, 255, 0).astype(np.uint8))
    logger.debug(f"Warped {src!r} into {out_width}x{out_height}, valid fraction {valid.mean():.3f}")
    return WarpResult(image, validity)


def partition(img: Raster, tile_size: int = DEFAULT_TILE_SIZE) -> Tuple[List[Tile], GridLayout]:
    """按 tile_size 无重叠分块，步长等于块大小"""
    if tile_size < MIN_TILE_SIZE:
        raise ConfigurationError(f"tile_size must be >= {MIN_TILE_SIZE}, got {tile_size}")
    layout = GridLayout.for_size(img.width, img.height, tile_size)
    tiles = []
    for ox, oy in layout.origins():
        bw, bh = layout.block_size(ox, oy)
        tiles.append(Tile(ox, oy, Raster(img.data[oy:oy + bh, ox:ox + bw])))
    return tiles, layout


def assemble_grid(blocks: Mapping[Tuple[int, int], np.ndarray], layout: GridLayout) -> np.ndarray:
    """
    将按原点索引的块放回父网格

    Args:
        blocks: {(origin_x, origin_y): 数组}，数组前两维为 (h, w)
        layout: 分块布局

    Returns:
        np.ndarray: 父尺寸的数组，dtype 与块一致
    """
    expected = list(layout.origins())
    missing = [o for o in expected if o not in blocks]
    if missing:
        raise AssemblyError(f"Missing tile at origin(s) {missing}")
    unexpected = [o for o in blocks if o not in set(expected)]
    if unexpected:
        raise AssemblyError(f"Tile origin(s) {unexpected} do not belong to the grid")

    first = np.asarray(blocks[expected[0]])
    out = np.zeros((layout.parent_height, layout.parent_width) + first.shape[2:], dtype=first.dtype)
    for ox, oy in expected:
        block = np.asarray(blocks[(ox, oy)])
        bw, bh = layout.block_size(ox, oy)
        if block.shape[:2] != (bh, bw) or block.shape[2:] != first.shape[2:]:
            raise AssemblyError(
                f"Tile at origin {(ox, oy)} has shape {block.shape}, expected {(bh, bw) + first.shape[2:]}"
            )
        out[oy:oy + bh, ox:ox + bw] = block
    return out


def stitch(tiles: Sequence[Tile], layout: GridLayout) -> Raster:
    """拼接瓦片，stitch(partition(img)) == img"""
    blocks: Dict[Tuple[int, int], np.ndarray] = {}
    for tile in tiles:
        if tile.origin in blocks:
            raise AssemblyError(f"Duplicate tile at origin {tile.origin}")
        blocks[tile.origin] = tile.payload.data
    return Raster(assemble_grid(blocks, layout))


def rotate90(img: Raster, quarter_turns: int) -> Raster:
    """无损旋转 90° 的整数倍（逆时针）"""
    return Raster(np.rot90(img.data, k=quarter_turns % 4, axes=(0, 1)))
