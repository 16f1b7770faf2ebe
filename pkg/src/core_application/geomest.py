"""
几何估计
Homography estimation (normalized DLT + RANSAC) and overlap detection

负责：
1. 单应矩阵的表示与齐次坐标变换
2. Hartley 归一化 DLT 与 RANSAC 鲁棒估计
3. 两幅影像公共区域（多边形）的提取与栅格化
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.config.pipeline_config import RansacConfig
from src.core_application.errors import (
    ContractError, DegeneracyError, EstimationError, GeometryError, InsufficientDataError
)
from src.core_application.raster import Raster

logger = logging.getLogger(__name__)

DET_EPS = 1e-12
W_EPS = 1e-12
MAX_CONDITION = 1e10
COLLINEAR_EPS = 1e-8
MINIMAL_SAMPLE = 4

Point = Tuple[float, float]


class Homography:
    """3x3 投影变换，m[2][2] 归一化为 1（接近 0 时改用 Frobenius 归一化）"""

    __slots__ = ("m",)

    def __init__(self, m):
        arr = np.array(m, dtype=np.float64)
        if arr.shape != (3, 3):
            raise GeometryError(f"Homography must be 3x3, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise GeometryError("Homography entries must be finite")
        if abs(arr[2, 2]) > 1e-12:
            arr = arr / arr[2, 2]
        else:
            norm = np.linalg.norm(arr)
            if norm == 0:
                raise GeometryError("Homography is the zero matrix")
            arr = arr / norm
        if abs(np.linalg.det(arr)) <= DET_EPS:
            raise GeometryError(f"Homography is singular (det={np.linalg.det(arr):.3e})")
        arr.flags.writeable = False
        object.__setattr__(self, "m", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Homography is immutable")

    def __repr__(self) -> str:
        rows = ", ".join("[" + ", ".join(f"{v:.6g}" for v in row) + "]" for row in self.m)
        return f"Homography([{rows}])"

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])

    @classmethod
    def rotation_about(cls, degrees: float, cx: float, cy: float) -> "Homography":
        """绕 (cx, cy) 旋转（图像坐标系，y 轴向下）"""
        t = math.radians(degrees)
        c, s = math.cos(t), math.sin(t)
        return cls([
            [c, -s, cx - c * cx + s * cy],
            [s, c, cy - s * cx - c * cy],
            [0.0, 0.0, 1.0],
        ])

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def compose(self, other: "Homography") -> "Homography":
        """self · other：先应用 other，再应用 self"""
        return Homography(self.m @ other.m)

    def to_list(self) -> List[List[float]]:
        return [[float(v) for v in row] for row in self.m]


def apply_h(h: Homography, p: Point) -> Point:
    """(u/w, v/w)，其中 (u, v, w) = m · (x, y, 1)"""
    u, v, w = h.m @ np.array([p[0], p[1], 1.0])
    if abs(w) <= W_EPS:
        raise GeometryError(f"Point {p} maps to the line at infinity")
    return float(u / w), float(v / w)


def apply_h_array(h: Homography, pts: np.ndarray) -> np.ndarray:
    """向量化版本；映射到无穷远的点返回 inf"""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    q = pts @ h.m[:, :2].T + h.m[:, 2]
    w = q[:, 2]
    out = np.full((len(pts), 2), np.inf)
    ok = np.abs(w) > W_EPS
    out[ok] = q[ok, :2] / w[ok, None]
    return out


def _normalize_points(pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """平移至质心并缩放到平均距离 √2"""
    centroid = pts.mean(axis=0)
    mean_dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if mean_dist <= 0:
        raise DegeneracyError("All points coincide")
    s = math.sqrt(2.0) / mean_dist
    t = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    return (pts - centroid) * s, t


def _has_collinear_triple(pts: np.ndarray) -> bool:
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            for k in range(j + 1, len(pts)):
                d1 = pts[j] - pts[i]
                d2 = pts[k] - pts[i]
                if abs(d1[0] * d2[1] - d1[1] * d2[0]) <= COLLINEAR_EPS:
                    return True
    return False


def _design_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    n = len(src)
    zeros, ones = np.zeros(n), np.ones(n)
    a = np.zeros((2 * n, 9))
    a[0::2] = np.column_stack([x, y, ones, zeros, zeros, zeros, -u * x, -u * y, -u])
    a[1::2] = np.column_stack([zeros, zeros, zeros, x, y, ones, -v * x, -v * y, -v])
    return a


def dlt_homography(src: Sequence[Point], dst: Sequence[Point]) -> Homography:
    """
    归一化 DLT：求 H 使 dst ~ H · src

    Args:
        src: 源点集 (N >= 4)
        dst: 目标点集

    Returns:
        Homography: 代数误差最小二乘解（已反归一化）
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise ContractError(f"Point count mismatch: {len(src)} vs {len(dst)}")
    if len(src) < MINIMAL_SAMPLE:
        raise InsufficientDataError(f"DLT needs at least {MINIMAL_SAMPLE} correspondences, got {len(src)}")

    src_n, t_src = _normalize_points(src)
    dst_n, t_dst = _normalize_points(dst)
    if len(src) == MINIMAL_SAMPLE and (_has_collinear_triple(src_n) or _has_collinear_triple(dst_n)):
        raise DegeneracyError("Minimal sample contains three collinear points")

    a = _design_matrix(src_n, dst_n)
    _, s, vt = np.linalg.svd(a)
    if s[7] <= 0 or s[0] / s[7] > MAX_CONDITION:
        raise DegeneracyError(f"Design matrix rank < 8 (condition {s[0] / max(s[7], 1e-300):.3e})")

    h_n = vt[-1].reshape(3, 3)
    m = np.linalg.inv(t_dst) @ h_n @ t_src
    try:
        return Homography(m)
    except GeometryError as e:
        raise DegeneracyError(f"DLT produced an invalid homography: {e}") from e


@dataclass(frozen=True, eq=False)
class RansacResult:
    homography: Homography
    inlier_mask: np.ndarray
    iterations: int = 0
    sample_inliers: int = 0

    @property
    def inlier_count(self) -> int:
        return int(self.inlier_mask.sum())


def _reprojection_errors(h: Homography, t2: np.ndarray, t1: np.ndarray) -> np.ndarray:
    projected = apply_h_array(h, t2)
    return np.sqrt(((projected - t1) ** 2).sum(axis=1))


def _required_iterations(inlier_ratio: float, confidence: float, cap: int) -> int:
    if inlier_ratio >= 1.0:
        return 1
    if inlier_ratio <= 0.0:
        return cap
    denom = math.log(1.0 - inlier_ratio ** MINIMAL_SAMPLE)
    if denom >= 0:
        return cap
    return min(cap, max(1, math.ceil(math.log(1.0 - confidence) / denom)))


def ransac_homography(kps, cfg: Optional[RansacConfig] = None) -> RansacResult:
    """
    RANSAC 估计 T2 -> T1 的单应矩阵

    内点判据：‖apply_h(H, t2_i) − t1_i‖₂ ≤ inlier_threshold。
    迭代次数按置信度公式自适应，硬上限 max_iterations；给定种子时结果确定。
    """
    cfg = cfg or RansacConfig()
    t1 = np.asarray(kps.t1, dtype=np.float64)
    t2 = np.asarray(kps.t2, dtype=np.float64)
    n = len(t1)
    if n < MINIMAL_SAMPLE:
        raise EstimationError(f"RANSAC needs at least {MINIMAL_SAMPLE} pairs, got {n}")

    rng = np.random.default_rng(cfg.seed or 0)
    best_h: Optional[Homography] = None
    best_mask = np.zeros(n, dtype=bool)
    best_count = 0
    limit = cfg.max_iterations
    iteration = 0
    while iteration < limit:
        iteration += 1
        idx = rng.choice(n, size=MINIMAL_SAMPLE, replace=False)
        try:
            h = dlt_homography(t2[idx], t1[idx])
        except GeometryError:
            continue
        mask = _reprojection_errors(h, t2, t1) <= cfg.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_h, best_mask, best_count = h, mask, count
            limit = _required_iterations(count / n, cfg.confidence, cfg.max_iterations)

    if best_h is None or best_count < MINIMAL_SAMPLE:
        raise EstimationError(
            f"RANSAC failed: best model has {best_count} inliers after {iteration} iterations"
        )

    sample_count = best_count
    final_h, final_mask = best_h, best_mask
    # 在内点集上反复重拟合，内点数不再增加时停止
    for _ in range(5):
        try:
            refit = dlt_homography(t2[final_mask], t1[final_mask])
        except GeometryError:
            break
        refit_mask = _reprojection_errors(refit, t2, t1) <= cfg.inlier_threshold
        if int(refit_mask.sum()) < int(final_mask.sum()):
            break
        converged = np.array_equal(refit_mask, final_mask)
        final_h, final_mask = refit, refit_mask
        if converged:
            break

    logger.info(
        f"✅ RANSAC: {int(final_mask.sum())}/{n} inliers after {iteration} iterations "
        f"(minimal-sample consensus {sample_count})"
    )
    return RansacResult(final_h, final_mask, iteration, sample_count)


def polygon_area(vertices: Sequence[Point]) -> float:
    """鞋带公式（带符号，逆时针为正）"""
    if len(vertices) < 3:
        return 0.0
    pts = np.asarray(vertices, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return float(0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


@dataclass(frozen=True)
class OverlapPolygon:
    vertices: Tuple[Point, ...] = field(default_factory=tuple)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) < 3

    @property
    def area(self) -> float:
        return abs(polygon_area(self.vertices))

    def to_list(self) -> List[List[float]]:
        return [[float(x), float(y)] for x, y in self.vertices]


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def clip_convex(subject: Sequence[Point], clip: Sequence[Point]) -> List[Point]:
    """Sutherland–Hodgman 裁剪，clip 必须为逆时针凸多边形；边界上的点视为内部"""
    output = list(subject)
    for i in range(len(clip)):
        if not output:
            break
        cp1, cp2 = clip[i - 1], clip[i]
        inputs, output = output, []
        s = inputs[-1]
        for e in inputs:
            e_in = _cross(cp1, cp2, e) >= 0
            s_in = _cross(cp1, cp2, s) >= 0
            if e_in:
                if not s_in:
                    output.append(_intersect(cp1, cp2, s, e))
                output.append(e)
            elif s_in:
                output.append(_intersect(cp1, cp2, s, e))
            s = e
    return output


def _intersect(cp1, cp2, s, e) -> Point:
    ds = _cross(cp1, cp2, s)
    de = _cross(cp1, cp2, e)
    t = ds / (ds - de)
    return (s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1]))


def _clean_vertices(vertices: List[Point], eps: float = 1e-9) -> List[Point]:
    cleaned: List[Point] = []
    for p in vertices:
        if not cleaned or math.hypot(p[0] - cleaned[-1][0], p[1] - cleaned[-1][1]) > eps:
            cleaned.append(p)
    while len(cleaned) > 1 and math.hypot(cleaned[0][0] - cleaned[-1][0], cleaned[0][1] - cleaned[-1][1]) <= eps:
        cleaned.pop()
    return cleaned


def _rect(width: float, height: float) -> List[Point]:
    return [(0.0, 0.0), (float(width), 0.0), (float(width), float(height)), (0.0, float(height))]


def overlap_polygon(t1_w: int, t1_h: int, t2_w: int, t2_h: int, h: Homography) -> OverlapPolygon:
    """T1 矩形与 H·(T2 矩形) 的交集，位于 T1 坐标系"""
    if abs(np.linalg.det(h.m)) <= DET_EPS:
        raise GeometryError("Cannot compute overlap with a singular homography")
    footprint = [apply_h(h, p) for p in _rect(t2_w, t2_h)]
    if polygon_area(footprint) < 0:
        footprint.reverse()
    clipped = _clean_vertices(clip_convex(footprint, _rect(t1_w, t1_h)))
    if len(clipped) < 3 or abs(polygon_area(clipped)) <= 1e-12:
        return OverlapPolygon()
    return OverlapPolygon(tuple((float(x), float(y)) for x, y in clipped))


def polygon_mask(poly: OverlapPolygon, width: int, height: int) -> Raster:
    """像素中心 (x, y) 位于多边形内部或边界上时为 255"""
    if poly.is_empty:
        return Raster.zeros(width, height)
    verts = list(poly.vertices)
    if polygon_area(verts) < 0:
        verts.reverse()
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    inside = np.ones((height, width), dtype=bool)
    for i in range(len(verts)):
        (x1, y1), (x2, y2) = verts[i - 1], verts[i]
        edge_len = math.hypot(x2 - x1, y2 - y1)
        cross = (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)
        inside &= cross >= -1e-9 * max(edge_len, 1.0)
    return Raster(np.where(inside, 255, 0).astype(np.uint8))
