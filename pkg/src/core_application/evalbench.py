"""
评估基准
Pixel metrics, the three-level synthetic distortion protocol with ground-truth
homographies, registration accuracy and synthetic scene generation.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.core_application.errors import ContractError
from src.core_application.geomest import Homography, OverlapPolygon, apply_h, polygon_mask
from src.core_application.raster import Raster, warp_raster

logger = logging.getLogger(__name__)

# 等级 -> (最大旋转角度, 最大平移比例)
LEVEL_BOUNDS: Dict[int, Tuple[float, float]] = {
    1: (10.0, 0.07),
    2: (20.0, 0.13),
    3: (30.0, 0.20),
}
MAX_ROTATION_DEG = 30.0
MAX_SHIFT_FRAC = 0.20
ERROR_GRID = 20
COMPOSITION_ORDER = "rotation-then-shift"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ContractError(f"Confusion count '{name}' must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_dict(self) -> Dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


class Metrics(NamedTuple):
    precision: float
    recall: float
    f1: float
    iou: float
    oa: float


def _ratio(num: float, den: float) -> float:
    """0/0 定义为 0"""
    return num / den if den else 0.0


def confusion(pred: Raster, gt: Raster, eval_mask: Optional[Raster] = None) -> ConfusionCounts:
    """在 eval_mask == 255 的像素上统计混淆矩阵，正类为 255"""
    rasters = {"pred": pred, "gt": gt}
    if eval_mask is not None:
        rasters["mask"] = eval_mask
    if len({r.shape for r in rasters.values()}) > 1:
        detail = ", ".join(f"{k}={r.width}x{r.height}" for k, r in rasters.items())
        raise ContractError(f"Dimension mismatch: {detail}")
    for name, r in rasters.items():
        if r.channels != 1:
            raise ContractError(f"'{name}' must be single-channel, got {r.channels} channels")

    p = pred.data == 255
    g = gt.data == 255
    region = np.ones_like(p) if eval_mask is None else eval_mask.data == 255
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g & region)),
        fp=int(np.count_nonzero(p & ~g & region)),
        fn=int(np.count_nonzero(~p & g & region)),
        tn=int(np.count_nonzero(~p & ~g & region)),
    )


def metrics(c: ConfusionCounts) -> Metrics:
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    iou = _ratio(c.tp, c.tp + c.fn + c.fp)
    oa = _ratio(c.tp + c.tn, c.total)
    return Metrics(precision, recall, f1, iou, oa)


# ==================== 几何畸变 ====================

@dataclass(frozen=True)
class DistortionSpec:
    level: int
    rotation_deg: float
    shift_frac: Tuple[float, float]
    seed: int = 0

    def validate(self) -> "DistortionSpec":
        if self.level not in LEVEL_BOUNDS:
            raise ContractError(f"Distortion level must be 1, 2 or 3, got {self.level}")
        max_rot, max_shift = LEVEL_BOUNDS[self.level]
        if abs(self.rotation_deg) > max_rot:
            raise ContractError(f"Level {self.level} rotation must be within ±{max_rot}°, got {self.rotation_deg}")
        for frac in self.shift_frac:
            if abs(frac) > max_shift:
                raise ContractError(f"Level {self.level} shift must be within ±{max_shift}, got {frac}")
        return self


def draw_distortion(level: int, seed: int) -> DistortionSpec:
    """在等级范围内均匀抽取旋转角度与平移比例"""
    if level not in LEVEL_BOUNDS:
        raise ContractError(f"Distortion level must be 1, 2 or 3, got {level}")
    max_rot, max_shift = LEVEL_BOUNDS[level]
    rng = np.random.default_rng(seed)
    rotation = float(rng.uniform(-max_rot, max_rot))
    dx, dy = rng.uniform(-max_shift, max_shift, size=2)
    return DistortionSpec(level, rotation, (float(dx), float(dy)), seed)


def distortion_homography(spec: DistortionSpec, width: int, height: int) -> Homography:
    """先绕图像中心旋转，再平移 shift_frac × 图像尺寸"""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    rotation = Homography.rotation_about(spec.rotation_deg, cx, cy)
    shift = Homography.translation(spec.shift_frac[0] * width, spec.shift_frac[1] * height)
    return shift.compose(rotation)


@dataclass(frozen=True)
class BenchScenario:
    t1: Raster
    t2_distorted: Raster
    gt_homography: Homography
    gt_change: Raster
    spec: DistortionSpec
    t2_aligned: Optional[Raster] = None
    name: str = ""


def generate_scenario(
    t1: Raster, t2_aligned: Raster, gt_change: Raster, spec: DistortionSpec, name: str = ""
) -> BenchScenario:
    """
    生成畸变场景

    gt_homography 将畸变 T2 坐标映射到 T1 坐标；t2_distorted 为 t2_aligned 按其逆变换重采样的结果。
    """
    if not (t1.shape == t2_aligned.shape == gt_change.shape):
        raise ContractError(
            f"Dimension mismatch: t1={t1.width}x{t1.height}, t2={t2_aligned.width}x{t2_aligned.height}, "
            f"gt_change={gt_change.width}x{gt_change.height}"
        )
    spec.validate()
    gt_h = distortion_homography(spec, t1.width, t1.height)
    distorted = warp_raster(t2_aligned, gt_h.inverse(), t1.width, t1.height).image
    logger.debug(
        f"Scenario level {spec.level}: rotation {spec.rotation_deg:.3f}°, shift {spec.shift_frac}"
    )
    return BenchScenario(t1, distorted, gt_h, gt_change, spec, t2_aligned, name)


def registration_error(estimated: Homography, gt: Homography, width: int, height: int) -> Tuple[float, float]:
    """20x20 采样网格上两个变换的映射差距 (均值, 最大值)"""
    xs = np.linspace(0.0, width - 1.0, ERROR_GRID)
    ys = np.linspace(0.0, height - 1.0, ERROR_GRID)
    errors = []
    for y in ys:
        for x in xs:
            ex, ey = apply_h(estimated, (x, y))
            gx, gy = apply_h(gt, (x, y))
            errors.append(math.hypot(ex - gx, ey - gy))
    return float(np.mean(errors)), float(np.max(errors))


# ==================== 合成场景 ====================

def _smooth_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    layers = []
    for sigma, weight in ((size / 32.0, 1.0), (6.0, 0.6), (2.0, 0.35)):
        noise = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
        layers.append(weight * noise / max(float(noise.std()), 1e-12))
    texture = np.sum(layers, axis=0)
    lo, hi = texture.min(), texture.max()
    return 40.0 + 130.0 * (texture - lo) / max(hi - lo, 1e-12)


def _rect_polygon(x: float, y: float, w: float, h: float, angle_deg: float = 0.0) -> OverlapPolygon:
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    cx, cy = x + w / 2.0, y + h / 2.0
    corners = [(-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2)]
    return OverlapPolygon(tuple((cx + c * u - s * v, cy + s * u + c * v) for u, v in corners))


def _regular_polygon(rng: np.random.Generator, cx: float, cy: float, radius: float) -> OverlapPolygon:
    """圆上随机角度的顶点，保证凸性"""
    count = int(rng.integers(5, 8))
    angles = np.sort(rng.uniform(0.0, 2 * math.pi, size=count))
    return OverlapPolygon(tuple((cx + radius * math.cos(a), cy + radius * math.sin(a)) for a in angles))


def _paint(canvas: np.ndarray, poly: OverlapPolygon, value: float) -> np.ndarray:
    h, w = canvas.shape
    inside = polygon_mask(poly, w, h).data == 255
    canvas[inside] = value
    return inside


def synthesize_scene(size: int = 512, seed: int = 0) -> Tuple[Raster, Raster, Raster]:
    """
    生成带纹理的双时相场景

    两期共有：平滑噪声纹理、道路和已有建筑；T2 额外插入矩形与多边形“建筑”，
    并叠加轻微的辐射差异与噪声。gt_change 为插入建筑的并集。

    Returns:
        (t1, t2_aligned, gt_change)
    """
    if size < 64:
        raise ContractError(f"Scene size must be >= 64, got {size}")
    rng = np.random.default_rng(seed)
    base = _smooth_texture(rng, size)

    for _ in range(3):
        width = float(rng.uniform(5, 9))
        angle = float(rng.uniform(0, 180))
        offset = float(rng.uniform(0.2, 0.8) * size)
        road = _rect_polygon(-size, offset - width / 2, 3 * size, width, 0.0)
        # 绕道路中点旋转
        pts = np.array(road.vertices) - (size / 2, offset)
        t = math.radians(angle)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        pts = pts @ rot.T + (size / 2, offset)
        _paint(base, OverlapPolygon(tuple(map(tuple, pts))), float(rng.uniform(95, 120)))

    for _ in range(max(4, size // 64)):
        w, h = rng.uniform(0.03, 0.08, size=2) * size
        x, y = rng.uniform(0.05, 0.9, size=2) * size
        _paint(base, _rect_polygon(x, y, w, h, float(rng.uniform(0, 90))), float(rng.uniform(175, 205)))

    t1 = base + rng.normal(0.0, 2.0, size=base.shape)
    t2 = 1.04 * base + 6.0 + rng.normal(0.0, 2.0, size=base.shape)

    changed = np.zeros(base.shape, dtype=bool)
    margin = 0.12 * size
    for _ in range(3):
        w, h = rng.uniform(0.06, 0.14, size=2) * size
        x = rng.uniform(margin, size - margin - w)
        y = rng.uniform(margin, size - margin - h)
        changed |= _paint(t2, _rect_polygon(x, y, w, h, float(rng.uniform(0, 45))), float(rng.uniform(225, 250)))
    for _ in range(2):
        radius = float(rng.uniform(0.04, 0.07) * size)
        cx, cy = rng.uniform(margin + radius, size - margin - radius, size=2)
        changed |= _paint(t2, _regular_polygon(rng, cx, cy, radius), float(rng.uniform(225, 250)))

    gt = Raster(np.where(changed, 255, 0).astype(np.uint8))
    return Raster.from_float(t1), Raster.from_float(t2), gt


def build_corpus(
    n_scenes: int = 4, levels: Sequence[int] = (1, 2, 3), size: int = 512, seed: int = 0
) -> List[BenchScenario]:
    """n_scenes 个基础场景 × 每个等级一个畸变场景"""
    scenarios = []
    for index in range(n_scenes):
        scene_seed = seed * 1000 + index
        t1, t2, gt = synthesize_scene(size, scene_seed)
        for level in levels:
            spec = draw_distortion(level, scene_seed * 10 + level)
            scenarios.append(generate_scenario(t1, t2, gt, spec, name=f"scene{index}_lv{level}"))
    logger.info(f"✅ Built synthetic corpus with {len(scenarios)} scenario(s)")
    return scenarios
