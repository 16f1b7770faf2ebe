"""
关键点匹配工具
Keypoint detection / description / matching and the hierarchical match-relocalize-union procedure

负责：
1. Shi-Tomasi 角点检测与非极大值抑制
2. 方向归一化的 11x11 块描述子、互为最近邻 + 比值检验匹配
3. 特征图关键点重定位到原图坐标，并对多层关键点求并集去重
"""
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.core_application.errors import ContractError
from src.core_application.featpyr import FilterBank, build_pyramid, fuse_layerwise
from src.core_application.raster import Raster, to_gray

if TYPE_CHECKING:
    from src.async_execution.worker_manager import WorkerManager
    from src.external_services.plugins import MatcherPlugin

logger = logging.getLogger(__name__)

DEFAULT_MAX_CORNERS = 1500
DEFAULT_NMS_RADIUS = 4
DEFAULT_PATCH_SIZE = 11
DEFAULT_RATIO = 0.9
DEFAULT_DEDUP_RADIUS = 1.0
BORDER = 5
ORIENTATION_RADIUS = 7
DESCRIPTOR_SIGMA = 1.0
MIN_PATCH_STD = 1e-6
RELOCALIZE_SCALES = (2, 4)


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """
    对应点集合

    t1 / t2 为 (N, 2) 的 (x, y) 亚像素坐标，confidence 为 [0, 1] 置信度，
    scale 为每对点所在特征图的下采样倍数（1, 2 或 4）。
    """

    t1: np.ndarray
    t2: np.ndarray
    confidence: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        t1 = np.asarray(self.t1, dtype=np.float64).reshape(-1, 2)
        t2 = np.asarray(self.t2, dtype=np.float64).reshape(-1, 2)
        conf = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        scale = np.asarray(self.scale, dtype=np.int64).reshape(-1)
        n = len(t1)
        if not (len(t2) == len(conf) == len(scale) == n):
            raise ContractError(
                f"KeypointSet arrays disagree in length: t1={n}, t2={len(t2)}, "
                f"confidence={len(conf)}, scale={len(scale)}"
            )
        if not np.all(np.isfinite(conf)):
            raise ContractError("KeypointSet confidences must be finite")
        if not (np.all(np.isfinite(t1)) and np.all(np.isfinite(t2))):
            raise ContractError("KeypointSet coordinates must be finite")
        bad = sorted(set(scale.tolist()) - {1, 2, 4})
        if bad:
            raise ContractError(f"KeypointSet scale must be 1, 2 or 4, got {bad}")
        for name, arr in (("t1", t1), ("t2", t2), ("confidence", conf), ("scale", scale)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.t1)

    @classmethod
    def empty(cls, scale: int = 1) -> "KeypointSet":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.full(0, scale))

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[Sequence[float], Sequence[float], float, int]]) -> "KeypointSet":
        rows = list(pairs)
        if not rows:
            return cls.empty()
        return cls(
            np.array([r[0] for r in rows], dtype=np.float64),
            np.array([r[1] for r in rows], dtype=np.float64),
            np.array([r[2] for r in rows], dtype=np.float64),
            np.array([r[3] for r in rows], dtype=np.int64),
        )

    def pairs(self) -> List[Tuple[Tuple[float, float], Tuple[float, float], float, int]]:
        return [
            ((float(a[0]), float(a[1])), (float(b[0]), float(b[1])), float(c), int(s))
            for a, b, c, s in zip(self.t1, self.t2, self.confidence, self.scale)
        ]

    def subset(self, index) -> "KeypointSet":
        return KeypointSet(self.t1[index], self.t2[index], self.confidence[index], self.scale[index])

    def with_scale(self, scale: int) -> "KeypointSet":
        return KeypointSet(self.t1, self.t2, self.confidence, np.full(len(self), scale))

    def swapped(self) -> "KeypointSet":
        return KeypointSet(self.t2, self.t1, self.confidence, self.scale)

    def sorted(self) -> "KeypointSet":
        """按 (x1, y1, x2, y2) 稳定排序"""
        if len(self) == 0:
            return self
        order = np.lexsort((self.t2[:, 1], self.t2[:, 0], self.t1[:, 1], self.t1[:, 0]))
        return self.subset(order)

    @staticmethod
    def concat(sets: Sequence["KeypointSet"]) -> "KeypointSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return KeypointSet.empty()
        return KeypointSet(
            np.concatenate([s.t1 for s in sets]),
            np.concatenate([s.t2 for s in sets]),
            np.concatenate([s.confidence for s in sets]),
            np.concatenate([s.scale for s in sets]),
        )


# ==================== 角点检测 ====================

def corner_response(gray: np.ndarray) -> np.ndarray:
    """Shi-Tomasi 响应：3x3 窗口结构张量的最小特征值"""
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    a = ndimage.uniform_filter(gx * gx, size=3, mode="nearest")
    b = ndimage.uniform_filter(gx * gy, size=3, mode="nearest")
    c = ndimage.uniform_filter(gy * gy, size=3, mode="nearest")
    half_trace = 0.5 * (a + c)
    root = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    return np.maximum(half_trace - root, 0.0)


def _subpixel_offset(minus: float, center: float, plus: float) -> float:
    denom = minus - 2.0 * center + plus
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (minus - plus) / denom, -0.5, 0.5))


def detect_corners(
    img: Raster,
    max_points: int = DEFAULT_MAX_CORNERS,
    nms_radius: int = DEFAULT_NMS_RADIUS,
) -> List[Tuple[float, float, float]]:
    """
    检测角点，按响应强度从大到小返回 (x, y, strength)

    Args:
        img: 输入影像，三通道自动转灰度
        max_points: 最多返回的点数
        nms_radius: 非极大值抑制半径

    Returns:
        List[Tuple[float, float, float]]: 亚像素坐标与响应值，可能为空
    """
    if max_points < 1:
        return []
    gray = to_gray(img)
    h, w = gray.shape
    if h <= 2 * BORDER or w <= 2 * BORDER:
        return []

    response = corner_response(gray)
    peak = float(response.max())
    threshold = max(0.01 * peak, 1e-3)
    local_max = response == ndimage.maximum_filter(response, size=3, mode="nearest")
    candidates = local_max & (response > threshold)
    candidates[:BORDER, :] = False
    candidates[-BORDER:, :] = False
    candidates[:, :BORDER] = False
    candidates[:, -BORDER:] = False

    ys, xs = np.nonzero(candidates)
    if len(ys) == 0:
        return []
    strengths = response[ys, xs]
    order = np.lexsort((xs, ys, -strengths))

    # 贪心半径抑制：已接受点周围的圆盘被屏蔽
    blocked = np.zeros_like(candidates)
    disk_y, disk_x = np.mgrid[-nms_radius:nms_radius + 1, -nms_radius:nms_radius + 1]
    disk = disk_x ** 2 + disk_y ** 2 <= nms_radius ** 2
    corners: List[Tuple[float, float, float]] = []
    for i in order:
        y, x = int(ys[i]), int(xs[i])
        if blocked[y, x]:
            continue
        dx = _subpixel_offset(response[y, x - 1], response[y, x], response[y, x + 1])
        dy = _subpixel_offset(response[y - 1, x], response[y, x], response[y + 1, x])
        corners.append((x + dx, y + dy, float(response[y, x])))
        if len(corners) >= max_points:
            break
        y0, y1 = max(0, y - nms_radius), min(h, y + nms_radius + 1)
        x0, x1 = max(0, x - nms_radius), min(w, x + nms_radius + 1)
        blocked[y0:y1, x0:x1] |= disk[y0 - y + nms_radius:y1 - y + nms_radius, x0 - x + nms_radius:x1 - x + nms_radius]
    return corners


# ==================== 描述子 ====================

def _orientations(smooth: np.ndarray, points: np.ndarray) -> np.ndarray:
    """灰度质心方向 atan2(m01, m10)"""
    r = ORIENTATION_RADIUS
    padded = np.pad(smooth, r, mode="edge")
    oy, ox = np.mgrid[-r:r + 1, -r:r + 1]
    disk = (ox ** 2 + oy ** 2 <= r * r).astype(np.float64)
    cx = np.rint(points[:, 0]).astype(np.int64) + r
    cy = np.rint(points[:, 1]).astype(np.int64) + r
    windows = padded[cy[:, None, None] + oy[None], cx[:, None, None] + ox[None]] * disk
    m10 = (windows * ox).sum(axis=(1, 2))
    m01 = (windows * oy).sum(axis=(1, 2))
    return np.arctan2(m01, m10)


def describe(
    img: Raster, corners: Sequence[Tuple[float, float, float]], patch_size: int = DEFAULT_PATCH_SIZE
) -> Tuple[np.ndarray, np.ndarray]:
    """
    计算方向归一化的块描述子

    Returns:
        (points (K, 2), descriptors (K, patch_size²))；平坦块被丢弃
    """
    dim = patch_size * patch_size
    if not corners:
        return np.zeros((0, 2)), np.zeros((0, dim))
    smooth = ndimage.gaussian_filter(to_gray(img), DESCRIPTOR_SIGMA, mode="nearest")
    points = np.array([(c[0], c[1]) for c in corners], dtype=np.float64)
    theta = _orientations(smooth, points)

    half = patch_size // 2
    gv, gu = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    cos_t = np.cos(theta)[:, None, None]
    sin_t = np.sin(theta)[:, None, None]
    sx = points[:, 0, None, None] + cos_t * gu - sin_t * gv
    sy = points[:, 1, None, None] + sin_t * gu + cos_t * gv
    samples = ndimage.map_coordinates(
        smooth, [sy.ravel(), sx.ravel()], order=1, mode="nearest", prefilter=False
    ).reshape(len(points), dim)

    mean = samples.mean(axis=1, keepdims=True)
    std = samples.std(axis=1, keepdims=True)
    keep = std[:, 0] > MIN_PATCH_STD
    desc = (samples[keep] - mean[keep]) / (std[keep] * math.sqrt(dim))
    return points[keep], desc


def _ratios(dist: np.ndarray, axis: int) -> np.ndarray:
    """最优 / 次优距离比；没有次优候选时为 0"""
    if dist.shape[axis] < 2:
        return np.zeros(dist.shape[1 - axis])
    part = np.partition(dist, 1, axis=axis)
    best = np.take(part, 0, axis=axis)
    second = np.take(part, 1, axis=axis)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(second > 0, best / np.where(second > 0, second, 1.0), np.where(best > 0, 0.0, 1.0))
    return ratio


def match_descriptors(
    pts_a: np.ndarray, desc_a: np.ndarray, pts_b: np.ndarray, desc_b: np.ndarray, ratio: float = DEFAULT_RATIO
) -> KeypointSet:
    """SSD 距离上的互为最近邻 + 双向比值检验，confidence = 1 − 最大比值"""
    if len(desc_a) == 0 or len(desc_b) == 0:
        return KeypointSet.empty()
    sq_a = (desc_a ** 2).sum(axis=1)[:, None]
    sq_b = (desc_b ** 2).sum(axis=1)[None, :]
    dist = np.maximum(sq_a + sq_b - 2.0 * desc_a @ desc_b.T, 0.0)

    nn_ab = np.argmin(dist, axis=1)
    nn_ba = np.argmin(dist, axis=0)
    rows = np.arange(len(desc_a))
    mutual = nn_ba[nn_ab] == rows
    ratio_a = _ratios(dist, axis=1)
    ratio_b = _ratios(dist, axis=0)
    worst = np.maximum(ratio_a, ratio_b[nn_ab])
    keep = mutual & (worst < ratio)

    ia = rows[keep]
    ib = nn_ab[keep]
    return KeypointSet(pts_a[ia], pts_b[ib], 1.0 - worst[keep], np.ones(len(ia), dtype=np.int64)).sorted()


def builtin_match(
    a: Raster,
    b: Raster,
    max_corners: int = DEFAULT_MAX_CORNERS,
    nms_radius: int = DEFAULT_NMS_RADIUS,
    patch_size: int = DEFAULT_PATCH_SIZE,
    ratio: float = DEFAULT_RATIO,
) -> KeypointSet:
    """内置匹配器：角点检测 + 块描述子 + 互为最近邻"""
    pts_a, desc_a = describe(a, detect_corners(a, max_corners, nms_radius), patch_size)
    pts_b, desc_b = describe(b, detect_corners(b, max_corners, nms_radius), patch_size)
    kps = match_descriptors(pts_a, desc_a, pts_b, desc_b, ratio)
    logger.debug(f"Builtin matcher: {len(pts_a)} / {len(pts_b)} described corners -> {len(kps)} matches")
    return kps


# ==================== 分层匹配 ====================

def relocalize(kps: KeypointSet) -> KeypointSet:
    """特征图坐标乘以下采样倍数，回到原图坐标"""
    if len(kps) == 0:
        return KeypointSet.empty()
    scales = np.unique(kps.scale)
    if len(scales) != 1:
        raise ContractError(f"Cannot relocalize mixed scales {scales.tolist()}")
    s = int(scales[0])
    if s not in RELOCALIZE_SCALES:
        raise ContractError(f"Relocalize expects scale 2 or 4, got {s}")
    return KeypointSet(kps.t1 * s, kps.t2 * s, kps.confidence, np.ones(len(kps), dtype=np.int64))


def union_keypoints(sets: Sequence[KeypointSet], radius: float = DEFAULT_DEDUP_RADIUS) -> KeypointSet:
    """
    多层关键点求并集

    两端点均落在已保留点对 radius 像素内的点对被丢弃，置信度高者优先；
    合并前先按 (x1, y1, x2, y2) 排序，保证与各层的计算顺序无关。
    """
    merged = KeypointSet.concat(sets).sorted()
    if len(merged) == 0:
        return merged
    order = np.argsort(-merged.confidence, kind="stable")
    cell = max(radius, 1.0)
    grid: Dict[Tuple[int, int], List[int]] = defaultdict(list)
    kept: List[int] = []
    for i in order:
        x1, y1 = merged.t1[i]
        key = (int(math.floor(x1 / cell)), int(math.floor(y1 / cell)))
        duplicate = False
        for gx in (key[0] - 1, key[0], key[0] + 1):
            for gy in (key[1] - 1, key[1], key[1] + 1):
                for j in grid.get((gx, gy), ()):
                    if (np.hypot(*(merged.t1[j] - merged.t1[i])) <= radius
                            and np.hypot(*(merged.t2[j] - merged.t2[i])) <= radius):
                        duplicate = True
                        break
                if duplicate:
                    break
            if duplicate:
                break
        if not duplicate:
            grid[key].append(int(i))
            kept.append(int(i))
    return merged.subset(np.array(sorted(kept), dtype=np.int64))


def _match_at_level(level: int, t1: Raster, t2: Raster, plugin: "MatcherPlugin", bank: FilterBank) -> KeypointSet:
    if level == 1:
        return plugin.match(t1, t2).with_scale(1)
    index = 0 if level == 2 else 1
    f1 = fuse_layerwise(build_pyramid(t1, bank)[index])
    f2 = fuse_layerwise(build_pyramid(t2, bank)[index])
    return relocalize(plugin.match(f1, f2).with_scale(level))


def fused_maps(img: Raster, bank: FilterBank) -> Dict[int, Raster]:
    """尺度 2 / 4 的融合特征图，用于导出检查"""
    level1, level2 = build_pyramid(img, bank)
    return {2: fuse_layerwise(level1), 4: fuse_layerwise(level2)}


def match_levels(
    t1: Raster,
    t2: Raster,
    plugin: "MatcherPlugin",
    bank: FilterBank,
    levels: Sequence[int] = (1, 2, 4),
    workers: Optional["WorkerManager"] = None,
) -> Dict[int, KeypointSet]:
    """
    逐层匹配：1 为原图，2 / 4 为融合特征图（结果已重定位到原图坐标）

    Returns:
        Dict[int, KeypointSet]: 以层级为键
    """
    levels = sorted(set(levels))
    bad = [lv for lv in levels if lv not in (1, 2, 4)]
    if bad:
        raise ContractError(f"Unknown matching level(s) {bad}")

    def run(level: int) -> KeypointSet:
        return _match_at_level(level, t1, t2, plugin, bank)

    if workers is not None:
        results = workers.map_ordered(run, levels, thread_safe=getattr(plugin, "thread_safe", True))
    else:
        results = [run(lv) for lv in levels]
    per_level = {lv: kps.sorted() for lv, kps in zip(levels, results)}
    logger.info(
        "🔍 Keypoints per level: " + ", ".join(f"x{lv}={len(k)}" for lv, k in per_level.items())
    )
    return per_level


def hierarchical_match(
    t1: Raster,
    t2: Raster,
    plugin: "MatcherPlugin",
    bank: FilterBank,
    levels: Sequence[int] = (1, 2, 4),
    dedup_radius: float = DEFAULT_DEDUP_RADIUS,
    workers: Optional["WorkerManager"] = None,
) -> KeypointSet:
    """原图匹配 ∪ 重定位的 ×2 层匹配 ∪ 重定位的 ×4 层匹配"""
    per_level = match_levels(t1, t2, plugin, bank, levels, workers)
    return union_keypoints([per_level[lv] for lv in sorted(per_level)], dedup_radius)
