"""
无训练特征金字塔
Training-free feature pyramid and layerwise additive fusion

以固定的高斯导数滤波器组代替预训练编码器的浅层特征，
尺度分别为 2 和 4，与关键点重定位的倍数一致。
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from src.core_application.errors import ConfigurationError, ContractError, NumericError
from src.core_application.raster import Raster, to_gray

logger = logging.getLogger(__name__)

PYRAMID_SCALES = (2, 4)
DEFAULT_SIGMA = 1.5


@dataclass(frozen=True, eq=False)
class Kernel:
    tag: str
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ConfigurationError(f"Kernel '{self.tag}' must be square with odd side, got {w.shape}")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class FilterBank:
    kernels: Tuple[Kernel, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.kernels)

    @property
    def tags(self) -> List[str]:
        return [k.tag for k in self.kernels]


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """data 形状 (C, H, W)，scale 为相对原图的下采样倍数"""

    data: np.ndarray
    scale: int

    def __post_init__(self):
        if self.scale not in (1, 2, 4):
            raise ContractError(f"FeatureMap scale must be 1, 2 or 4, got {self.scale}")
        if np.asarray(self.data).ndim != 3:
            raise ContractError(f"FeatureMap data must be (C, H, W), got shape {np.shape(self.data)}")

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def height(self) -> int:
        return int(self.data.shape[1])

    @property
    def width(self) -> int:
        return int(self.data.shape[2])


def default_filter_bank(sigma: float = DEFAULT_SIGMA) -> FilterBank:
    """
    默认滤波器组：一阶导数 (x, y)、二阶导数 (xx, yy) 和高斯平滑，共 5 个核

    导数核减去均值使其和严格为 0。
    """
    if sigma <= 0:
        raise ConfigurationError(f"Filter bank sigma must be > 0, got {sigma}")
    radius = max(1, int(math.ceil(3 * sigma)))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    dg = -ax / sigma ** 2 * g
    ddg = (ax ** 2 - sigma ** 2) / sigma ** 4 * g

    def zero_sum(k: np.ndarray) -> np.ndarray:
        return k - k.mean()

    return FilterBank((
        Kernel("gauss_dx", zero_sum(np.outer(g, dg))),
        Kernel("gauss_dy", zero_sum(np.outer(dg, g))),
        Kernel("gauss_dxx", zero_sum(np.outer(g, ddg))),
        Kernel("gauss_dyy", zero_sum(np.outer(ddg, g))),
        Kernel("gauss_smooth", np.outer(g, g)),
    ))


def downsample2(grid: np.ndarray) -> np.ndarray:
    """2x2 盒滤波平均后抽样；奇数尺寸按边缘复制补齐，输出尺寸为 ceil(n / 2)"""
    h, w = grid.shape
    padded = np.pad(grid, ((0, h % 2), (0, w % 2)), mode="edge")
    return 0.25 * (padded[0::2, 0::2] + padded[1::2, 0::2] + padded[0::2, 1::2] + padded[1::2, 1::2])


def _respond(grid: np.ndarray, bank: FilterBank, scale: int) -> FeatureMap:
    channels = [ndimage.convolve(grid, k.weights, mode="nearest") for k in bank.kernels]
    return FeatureMap(np.stack(channels), scale)


def build_pyramid(img: Raster, bank: FilterBank) -> Tuple[FeatureMap, FeatureMap]:
    """
    构建尺度 2 与尺度 4 的特征图

    Args:
        img: 输入影像（三通道先转灰度）
        bank: 滤波器组

    Returns:
        (FeatureMap@2, FeatureMap@4)
    """
    if len(bank) == 0:
        raise ConfigurationError("Filter bank is empty")
    gray = to_gray(img)
    half = downsample2(gray)
    quarter = downsample2(half)
    level1 = _respond(half, bank, 2)
    level2 = _respond(quarter, bank, 4)
    logger.debug(
        f"Feature pyramid for {img!r}: scale 2 -> {level1.width}x{level1.height}, "
        f"scale 4 -> {level2.width}x{level2.height}, {len(bank)} channels"
    )
    return level1, level2


def fuse_layerwise(fm: FeatureMap) -> Raster:
    """逐层相加融合：通道求和后 min-max 线性拉伸到 [0, 255]，常量输入得到常量输出"""
    if fm.channels < 1:
        raise ContractError("FeatureMap has no channels")
    data = np.asarray(fm.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"FeatureMap at scale {fm.scale} contains non-finite samples")
    total = data.sum(axis=0)
    lo, hi = float(total.min()), float(total.max())
    if hi - lo <= 0:
        return Raster.zeros(fm.width, fm.height)
    return Raster.from_float((total - lo) * (255.0 / (hi - lo)))
