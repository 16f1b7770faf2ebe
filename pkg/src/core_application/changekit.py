"""
变化检测
Per-tile change scoring with guidance fusion, tile stitching, overlap masking and the
weighted cross-entropy kernel.
"""
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Literal, Optional, Tuple

import numpy as np
from scipy import ndimage

from src.core_application.errors import ContractError
from src.core_application.raster import DEFAULT_TILE_SIZE, Raster, assemble_grid, partition, to_gray

if TYPE_CHECKING:
    from src.async_execution.worker_manager import WorkerManager
    from src.external_services.plugins import ClassifierPlugin, SegmenterPlugin

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
DEFAULT_OMEGA = 2.0
GUIDE_ALPHA = 0.3
SMOOTHING_SIGMA = 2.0
# 归一化差异达到该值时得分为 1
SATURATION = 1.5
STD_FLOOR = 1.0
# 正态分布下 MAD 与标准差的换算系数
MAD_SCALE = 1.4826
# 重加权：以当前得分低于 STABLE_SCORE 的像素重新估计归一化统计量
REWEIGHT_ROUNDS = 3
STABLE_SCORE = 0.5
MIN_STABLE_FRACTION = 0.25
BCE_EPS = 1e-7
# 配准残差容忍半径(像素)
SHIFT_TOLERANCE = 1

Normalization = Literal["robust", "mean_std"]
NORMALIZATIONS = ("robust", "mean_std")


@dataclass(frozen=True, eq=False)
class ChangeMap:
    """T1 坐标系下的概率图与二值图，binary 为 255 当且仅当 probs ≥ threshold"""

    probs: np.ndarray
    binary: Raster
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.shape != self.binary.data.shape:
            raise ContractError(f"probs shape {probs.shape} does not match binary shape {self.binary.data.shape}")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_probs(cls, probs: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> "ChangeMap":
        if not 0 < threshold < 1:
            raise ContractError(f"threshold must be in (0, 1), got {threshold}")
        probs = np.clip(np.asarray(probs, dtype=np.float64), 0.0, 1.0)
        binary = Raster(np.where(probs >= threshold, 255, 0).astype(np.uint8))
        return cls(probs, binary, threshold)

    @property
    def width(self) -> int:
        return self.binary.width

    @property
    def height(self) -> int:
        return self.binary.height

    def probability_raster(self) -> Raster:
        """probs × 255 四舍五入"""
        return Raster.from_float(self.probs * 255.0)


def _require_same_size(**rasters: Raster) -> None:
    sizes = {name: r.shape for name, r in rasters.items()}
    if len(set(sizes.values())) > 1:
        detail = ", ".join(f"{name}={w}x{h}" for name, (w, h) in sizes.items())
        raise ContractError(f"Dimension mismatch: {detail}")


def _normalize(grid: np.ndarray, stable: Optional[np.ndarray] = None, method: Normalization = "robust") -> np.ndarray:
    """
    瓦片级标准化

    mean_std 使用均值 / 标准差；robust 使用中位数 / MAD，stable 给定时只在这些像素上估计。
    """
    sample = grid if stable is None else grid[stable]
    if method == "mean_std":
        center, spread = float(sample.mean()), float(sample.std())
    else:
        center = float(np.median(sample))
        spread = MAD_SCALE * float(np.median(np.abs(sample - center)))
    return (grid - center) / max(spread, STD_FLOOR)


def _range_distance(value: np.ndarray, other: np.ndarray, radius: int) -> np.ndarray:
    """value 到 other 在 (2r+1)² 邻域内取值区间的距离，落在区间内为 0"""
    size = 2 * radius + 1
    low = ndimage.minimum_filter(other, size=size, mode="nearest")
    high = ndimage.maximum_filter(other, size=size, mode="nearest")
    return np.maximum(np.maximum(low - value, value - high), 0.0)


def tolerant_difference(z1: np.ndarray, z2: np.ndarray, radius: int = SHIFT_TOLERANCE) -> np.ndarray:
    """
    容忍亚像素配准残差的绝对差

    radius=0 时等于 |z1 − z2|；否则取两个方向邻域区间距离的较小值，
    边缘在 radius 像素内的错位与重采样模糊不产生差异，大片变化区域只在边界收缩 radius 像素。
    """
    if radius < 0:
        raise ContractError(f"shift tolerance must be >= 0, got {radius}")
    if radius == 0:
        return np.abs(z1 - z2)
    return np.minimum(_range_distance(z1, z2, radius), _range_distance(z2, z1, radius))


def _difference_score(
    g1: np.ndarray,
    g2: np.ndarray,
    stable: Optional[np.ndarray],
    sigma: float,
    saturation: float,
    method: Normalization,
    tolerance: int,
) -> np.ndarray:
    diff = tolerant_difference(_normalize(g1, stable, method), _normalize(g2, stable, method), tolerance)
    smoothed = ndimage.gaussian_filter(diff, sigma, mode="nearest")
    # 仿射映射：差异 0 → 0，差异 saturation → 1
    return np.clip(smoothed / saturation, 0.0, 1.0)


def baseline_score(
    tile1: Raster,
    tile2: Raster,
    guide1: Optional[Raster] = None,
    guide2: Optional[Raster] = None,
    alpha: float = GUIDE_ALPHA,
    sigma: float = SMOOTHING_SIGMA,
    saturation: float = SATURATION,
    normalization: Normalization = "robust",
    tolerance: int = SHIFT_TOLERANCE,
) -> np.ndarray:
    """
    默认分类器：瓦片标准化差异 + 高斯平滑 + 仿射映射 + 引导融合

    normalization="mean_std" 为单轮均值 / 标准差标准化；
    "robust" 使用中位数 / MAD，并在未变化像素上迭代重估统计量（最多 REWEIGHT_ROUNDS 轮）。

    Args:
        tile1, tile2: 配准后的同尺寸瓦片
        guide1, guide2: 0/255 分割引导掩膜，均为 None 时不做融合
        alpha: 背景保留系数，score ← score · (α + (1 − α) · g)
        tolerance: 配准残差容忍半径，0 表示逐像素绝对差

    Returns:
        np.ndarray: [0, 1] 概率瓦片
    """
    _require_same_size(tile1=tile1, tile2=tile2)
    if normalization not in NORMALIZATIONS:
        raise ContractError(f"normalization must be one of {NORMALIZATIONS}, got {normalization!r}")
    g1, g2 = to_gray(tile1), to_gray(tile2)
    score = _difference_score(g1, g2, None, sigma, saturation, normalization, tolerance)
    if normalization == "robust":
        # 大面积变化会拉偏整块统计量，迭代排除疑似变化像素
        for _ in range(REWEIGHT_ROUNDS):
            stable = score < STABLE_SCORE
            if np.count_nonzero(stable) < MIN_STABLE_FRACTION * stable.size:
                break
            score = _difference_score(g1, g2, stable, sigma, saturation, normalization, tolerance)
    if guide1 is None and guide2 is None:
        return score

    guides = [g for g in (guide1, guide2) if g is not None]
    _require_same_size(tile1=tile1, **{f"guide{i + 1}": g for i, g in enumerate(guides)})
    g = np.maximum.reduce([gd.data.astype(np.float64) for gd in guides]) / 255.0
    return score * (alpha + (1.0 - alpha) * g)


def guide_mask(tile: Raster, segmenter: "SegmenterPlugin") -> Raster:
    """分割器所有候选掩膜的并集"""
    return segmenter.guide(tile)


def detect_changes(
    t1: Raster,
    t2_registered: Raster,
    validity: Raster,
    plugin: "ClassifierPlugin",
    segmenter: Optional["SegmenterPlugin"],
    tile_size: int = DEFAULT_TILE_SIZE,
    threshold: float = DEFAULT_THRESHOLD,
    workers: Optional["WorkerManager"] = None,
) -> ChangeMap:
    """
    分块打分并拼接为 M_Init

    T2 的无效像素先用 T1 的值填充，因此配准外区域不会产生差异；
    segmenter 为 None 时不计算引导掩膜（无先验知识的基线版本）。
    """
    _require_same_size(t1=t1, t2_registered=t2_registered, validity=validity)
    if not 0 < threshold < 1:
        raise ContractError(f"threshold must be in (0, 1), got {threshold}")

    valid = validity.data > 0
    if not valid.any():
        logger.warning("⚠️ Validity mask is all zero, change map will be empty")
    fill = valid if t2_registered.channels == 1 else valid[:, :, None]
    filled = Raster(np.where(fill, t2_registered.data, t1.data if t1.channels == t2_registered.channels else 0))

    tiles1, layout = partition(t1, tile_size)
    tiles2, _ = partition(filled, tile_size)

    def score(pair) -> np.ndarray:
        a, b = pair
        if segmenter is None:
            return plugin.score(a.payload, b.payload, None, None)
        return plugin.score(a.payload, b.payload, guide_mask(a.payload, segmenter), guide_mask(b.payload, segmenter))

    pairs = list(zip(tiles1, tiles2))
    thread_safe = getattr(plugin, "thread_safe", True) and getattr(segmenter, "thread_safe", True)
    if workers is not None:
        results = workers.map_ordered(score, pairs, thread_safe=thread_safe)
    else:
        results = [score(p) for p in pairs]

    blocks: Dict[Tuple[int, int], np.ndarray] = {}
    for (a, _), probs in zip(pairs, results):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != a.payload.data.shape[:2]:
            raise ContractError(
                f"Classifier returned shape {probs.shape} for tile at {a.origin}, expected {a.payload.data.shape[:2]}"
            )
        blocks[a.origin] = probs

    m_init = assemble_grid(blocks, layout)
    m_init = np.where(valid, m_init, 0.0)
    change = ChangeMap.from_probs(m_init, threshold)
    logger.info(
        f"✅ Change detection over {len(pairs)} tile(s): "
        f"{int(np.count_nonzero(change.binary.data))} changed pixel(s)"
    )
    return change


def apply_overlap_mask(m_init: ChangeMap, mask_ob: Raster) -> ChangeMap:
    """M_Final = M_Init ⊙ Mask_OB"""
    if mask_ob.channels != 1 or mask_ob.shape != m_init.binary.shape:
        raise ContractError(
            f"Overlap mask {mask_ob.width}x{mask_ob.height}x{mask_ob.channels} does not match "
            f"change map {m_init.width}x{m_init.height}"
        )
    factor = mask_ob.data.astype(np.float64) / 255.0
    probs = m_init.probs * factor
    binary = Raster.from_float(m_init.binary.data.astype(np.float64) * factor)
    return ChangeMap(probs, binary, m_init.threshold)


def weighted_bce(pred, target, omega: float = DEFAULT_OMEGA) -> float:
    """mean(−[ω·ŷ·log y + (1 − ŷ)·log(1 − y)])，y 截断到 [1e-7, 1 − 1e-7]"""
    if not omega > 0:
        raise ContractError(f"omega must be > 0, got {omega}")
    y = np.clip(np.asarray(pred, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    t = np.asarray(target, dtype=np.float64)
    if y.shape != t.shape:
        raise ContractError(f"pred shape {y.shape} does not match target shape {t.shape}")
    loss = -(omega * t * np.log(y) + (1.0 - t) * np.log1p(-y))
    return float(loss.mean())
