"""
实例对比预训练数学内核
Instance mask filtering, instance extraction, view augmentation and the centered
temperature-scaled cross-entropy used by instance contrastive pre-training.

本模块不包含网络训练，只提供可独立测试的确定性计算。
"""
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.special import log_softmax, softmax

from src.core_application.errors import ContractError
from src.core_application.raster import LUMA_WEIGHTS, Raster, rotate90, to_gray

if TYPE_CHECKING:
    from src.external_services.plugins import SegmenterPlugin

logger = logging.getLogger(__name__)

MIN_PORTION = 0.10
MAX_PORTION = 0.50
ROTATE_PROBABILITY = 0.5
JITTER_RANGE = (0.8, 1.2)
CENTER_MOMENTUM = 0.9
DEFAULT_WINDOW = 31
DEFAULT_OFFSET = 5.0

SeedLike = Union[int, np.random.SeedSequence]


class InstanceMask:
    """0/255 单通道掩膜，pixel_portion 在构造时计算"""

    __slots__ = ("mask", "pixel_portion")

    def __init__(self, mask: Raster):
        if mask.channels != 1:
            raise ContractError(f"Instance mask must be single-channel, got {mask.channels} channels")
        values = mask.data
        if np.any((values != 0) & (values != 255)):
            raise ContractError("Instance mask values must be 0 or 255")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "pixel_portion", float(np.count_nonzero(values == 255)) / values.size)

    def __setattr__(self, name, value):
        raise AttributeError("InstanceMask is immutable")

    def __repr__(self) -> str:
        return f"InstanceMask({self.mask.width}x{self.mask.height}, portion={self.pixel_portion:.4f})"

    @classmethod
    def from_bool(cls, selected: np.ndarray) -> "InstanceMask":
        return cls(Raster(np.where(selected, 255, 0).astype(np.uint8)))


def filter_masks(masks: Sequence[InstanceMask]) -> List[InstanceMask]:
    """保留 10% ≤ pixel_portion ≤ 50% 的掩膜（闭区间，保持原顺序）"""
    return [m for m in masks if MIN_PORTION <= m.pixel_portion <= MAX_PORTION]


def extract_instance(img: Raster, mask: InstanceMask) -> Raster:
    """掩膜为 255 处保留原像素，其余置 0"""
    if mask.mask.shape != img.shape:
        raise ContractError(
            f"Mask size {mask.mask.width}x{mask.mask.height} does not match image {img.width}x{img.height}"
        )
    keep = mask.mask.data == 255
    if img.channels == 3:
        keep = keep[:, :, None]
    return Raster(np.where(keep, img.data, 0).astype(np.uint8))


def foreground(
    img: Raster, window: int = DEFAULT_WINDOW, offset: float = DEFAULT_OFFSET, global_fallback: bool = True
) -> np.ndarray:
    """
    自适应均值阈值：高于局部均值 + offset 的像素为前景

    global_fallback 为 True 时，高于全局均值的像素也算前景。
    纯局部规则下，尺寸大于窗口的均匀亮目标只有边缘一圈能超过局部均值，内部会被漏掉。
    """
    gray = to_gray(img)
    local_mean = ndimage.uniform_filter(gray, size=window, mode="nearest")
    if not global_fallback:
        return gray > local_mean + offset
    return gray > np.minimum(local_mean + offset, gray.mean())


def builtin_segment(
    img: Raster, window: int = DEFAULT_WINDOW, offset: float = DEFAULT_OFFSET, global_fallback: bool = True
) -> List[InstanceMask]:
    """内置类别无关分割：自适应阈值 + 4 连通域，每个连通域输出一个掩膜（按标号顺序）"""
    labels, count = ndimage.label(foreground(img, window, offset, global_fallback))
    return [InstanceMask.from_bool(labels == k) for k in range(1, count + 1)]


def generate_instances(img: Raster, segmenter: "SegmenterPlugin") -> List[Raster]:
    """分割 -> 比例过滤 -> 实例提取"""
    kept = filter_masks(segmenter.propose(img))
    logger.debug(f"Instance generation on {img!r}: {len(kept)} instance(s) kept")
    return [extract_instance(img, m) for m in kept]


def instance_inventory(masks: Sequence[InstanceMask]) -> List[Dict[str, Any]]:
    """掩膜清单：编号、像素比例、是否保留"""
    return [
        {
            "id": index,
            "pixel_portion": m.pixel_portion,
            "kept": MIN_PORTION <= m.pixel_portion <= MAX_PORTION,
        }
        for index, m in enumerate(masks)
    ]


# ==================== 视图增强 ====================

@dataclass(frozen=True)
class AugmentParams:
    quarter_turns: int = 0
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0


def draw_augment_params(seed: SeedLike) -> AugmentParams:
    """按固定顺序抽取：是否旋转、90°/180°、亮度、对比度、饱和度"""
    rng = np.random.default_rng(seed)
    rotate = rng.random() < ROTATE_PROBABILITY
    turns = 1 if rng.random() < 0.5 else 2
    lo, hi = JITTER_RANGE
    brightness, contrast, saturation = rng.uniform(lo, hi, size=3)
    return AugmentParams(
        quarter_turns=turns if rotate else 0,
        brightness=float(brightness),
        contrast=float(contrast),
        saturation=float(saturation),
    )


def apply_augment(img: Raster, params: AugmentParams) -> Raster:
    if params.quarter_turns not in (0, 1, 2):
        raise ContractError(f"Rotation must be 0, 90 or 180 degrees, got {params.quarter_turns} quarter turns")
    out = rotate90(img, params.quarter_turns) if params.quarter_turns else img
    values = out.data.astype(np.float64) * params.brightness
    mean = float(values.mean()) if out.channels == 1 else float((values @ LUMA_WEIGHTS).mean())
    values = mean + params.contrast * (values - mean)
    if out.channels == 3:
        gray = (values @ LUMA_WEIGHTS)[:, :, None]
        values = gray + params.saturation * (values - gray)
    return Raster.from_float(values)


def augment_view(img: Raster, rng_seed: SeedLike) -> Raster:
    """50% 概率旋转 90°/180°，然后亮度 / 对比度 / 饱和度抖动，给定种子时确定"""
    return apply_augment(img, draw_augment_params(rng_seed))


def make_view_pair(instance: Raster, seed: Union[int, Sequence[int]]) -> Tuple[Raster, Raster]:
    """同一实例的两个独立增强视图"""
    first, second = np.random.SeedSequence(seed).spawn(2)
    return augment_view(instance, first), augment_view(instance, second)


# ==================== 损失与中心 ====================

@dataclass(frozen=True, eq=False)
class ClusterCenter:
    values: np.ndarray
    momentum: float = CENTER_MOMENTUM

    def __post_init__(self):
        v = _embedding(self.values, "center")
        if not 0 < self.momentum < 1:
            raise ContractError(f"Center momentum must be in (0, 1), got {self.momentum}")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, dim: int, momentum: float = CENTER_MOMENTUM) -> "ClusterCenter":
        return cls(np.zeros(dim), momentum)

    @property
    def dim(self) -> int:
        return len(self.values)


def _embedding(values, name: str) -> np.ndarray:
    v = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ContractError(f"Embedding '{name}' contains non-finite entries")
    v.flags.writeable = False
    return v


def dino_loss_term(x, y, center: ClusterCenter, tau: float) -> float:
    """D(x, y) = −Σ softmax((x − C)/τ) · log_softmax(y/τ)"""
    if not tau > 0:
        raise ContractError(f"Temperature must be > 0, got {tau}")
    xv = _embedding(x, "x")
    yv = _embedding(y, "y")
    if not len(xv) == len(yv) == center.dim:
        raise ContractError(f"Dimension mismatch: x={len(xv)}, y={len(yv)}, center={center.dim}")
    p = softmax((xv - center.values) / tau)
    log_q = log_softmax(yv / tau)
    return float(-np.dot(p, log_q))


def symmetric_pretrain_loss(pt1, pt2, ps1, ps2, center: ClusterCenter, tau: float) -> float:
    """D(pt1, ps2)/2 + D(pt2, ps1)/2"""
    return dino_loss_term(pt1, ps2, center, tau) / 2 + dino_loss_term(pt2, ps1, center, tau) / 2


def update_center(center: ClusterCenter, teacher_outputs: Sequence) -> ClusterCenter:
    """C' = m·C + (1 − m)·Σ P_t（按求和更新）"""
    if len(teacher_outputs) == 0:
        raise ContractError("update_center needs at least one teacher output")
    stacked = np.stack([_embedding(p, "teacher output") for p in teacher_outputs])
    if stacked.shape[1] != center.dim:
        raise ContractError(f"Teacher outputs have dimension {stacked.shape[1]}, center has {center.dim}")
    m = center.momentum
    return ClusterCenter(m * center.values + (1 - m) * stacked.sum(axis=0), m)
