"""
Pipeline configuration
将配准 / 变化检测流程的所有参数集中管理
"""
from typing import Any, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config.settings import settings
from src.core_application.errors import ConfigurationError
from src.core_application.raster import MIN_TILE_SIZE


class RansacConfig(BaseModel):
    """RANSAC 参数"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    inlier_threshold: float = Field(
        default=3.0,
        gt=0,
        description="内点重投影误差阈值(像素)"
    )
    max_iterations: int = Field(
        default=5000,
        ge=1,
        description="最大迭代次数"
    )
    confidence: float = Field(
        default=0.999,
        gt=0,
        lt=1,
        description="自适应迭代次数使用的置信度"
    )
    seed: Optional[int] = Field(
        default=None,
        description="随机种子，未设置时取流程种子"
    )


class MatchingConfig(BaseModel):
    """分层匹配参数"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    levels: List[int] = Field(
        default=[1, 2, 4],
        description="参与匹配的尺度层级（1=原图, 2=二倍下采样层, 4=四倍下采样层）"
    )
    max_corners: int = Field(
        default=1500,
        ge=1,
        description="每幅影像最多检测的角点数"
    )
    ratio: float = Field(
        default=0.9,
        gt=0,
        le=1,
        description="比值检验阈值"
    )
    nms_radius: int = Field(
        default=4,
        ge=1,
        description="非极大值抑制半径(像素)"
    )
    patch_size: int = Field(
        default=11,
        ge=5,
        description="描述子邻域边长(像素，奇数)"
    )
    dedup_radius: float = Field(
        default=1.0,
        ge=0,
        description="重定位后去重半径(像素)"
    )
    filter_sigma: float = Field(
        default=1.5,
        gt=0,
        description="默认滤波器组的高斯尺度"
    )

    @field_validator("levels")
    @classmethod
    def validate_levels(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("levels must not be empty")
        bad = [lv for lv in v if lv not in (1, 2, 4)]
        if bad:
            raise ValueError(f"levels must be a subset of {{1, 2, 4}}, got {bad}")
        return sorted(set(v))

    @field_validator("patch_size")
    @classmethod
    def validate_patch_size(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError(f"patch_size must be odd, got {v}")
        return v


class DetectionConfig(BaseModel):
    """变化检测参数"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    guidance: bool = Field(
        default=True,
        description="是否使用分割掩膜作为先验知识进行融合"
    )
    alpha: float = Field(
        default=0.3,
        ge=0,
        le=1,
        description="引导融合中背景区域的保留系数"
    )
    smoothing_sigma: float = Field(
        default=2.0,
        gt=0,
        description="差异图高斯平滑尺度"
    )
    saturation: float = Field(
        default=1.5,
        gt=0,
        description="映射到得分 1.0 的归一化差异值"
    )
    normalization: Literal["robust", "mean_std"] = Field(
        default="robust",
        description="瓦片标准化方式：robust 为中位数/MAD 加迭代重估，mean_std 为单轮均值/标准差"
    )
    shift_tolerance: int = Field(
        default=1,
        ge=0,
        le=3,
        description="差异计算容忍的配准残差半径(像素)，0 表示逐像素绝对差"
    )


class PipelineConfig(BaseModel):
    """完整流程配置，对应单个 JSON 配置文件"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    tile_size: int = Field(
        default=256,
        ge=MIN_TILE_SIZE,
        description="分块大小(像素)，步长等于块大小"
    )
    ransac: RansacConfig = Field(
        default_factory=RansacConfig,
        description="RANSAC 参数"
    )
    threshold: float = Field(
        default=0.5,
        gt=0,
        lt=1,
        description="概率图二值化阈值"
    )
    omega: float = Field(
        default=2.0,
        gt=0,
        description="加权交叉熵正样本权重"
    )
    matcher: str = Field(
        default="builtin",
        description="匹配器：builtin 或子进程命令"
    )
    segmenter: str = Field(
        default="builtin",
        description="分割器：builtin 或子进程命令"
    )
    seed: int = Field(
        default=0,
        ge=0,
        lt=2 ** 64,
        description="全局随机种子"
    )
    workers: int = Field(
        default_factory=lambda: settings.default_workers,
        ge=1,
        description="工作线程数"
    )
    segmenter_window: int = Field(
        default=31,
        ge=3,
        description="内置分割器自适应阈值窗口(像素)"
    )
    segmenter_offset: float = Field(
        default=5.0,
        description="内置分割器阈值偏移"
    )
    segmenter_global_fallback: bool = Field(
        default=True,
        description="内置分割器是否把高于全局均值的像素也视为前景"
    )
    matching: MatchingConfig = Field(
        default_factory=MatchingConfig,
        description="匹配参数"
    )
    detection: DetectionConfig = Field(
        default_factory=DetectionConfig,
        description="检测参数"
    )

    @field_validator("matcher", "segmenter")
    @classmethod
    def validate_plugin_spec(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("plugin must be 'builtin' or a command line")
        return v.strip()

    @model_validator(mode="before")
    @classmethod
    def resolve_ransac_seed(cls, data: Any) -> Any:
        """RANSAC 未设置种子时继承流程种子"""
        if not isinstance(data, dict):
            return data
        data = dict(data)
        ransac = data.get("ransac") or {}
        if isinstance(ransac, RansacConfig):
            ransac = ransac.model_dump()
        if isinstance(ransac, dict) and ransac.get("seed") is None:
            data["ransac"] = {**ransac, "seed": data.get("seed", 0)}
        return data

    # ==================== 实用方法 ====================

    def with_overrides(self, seed: Optional[int] = None, workers: Optional[int] = None) -> "PipelineConfig":
        """应用命令行覆盖项，返回新的配置"""
        data = self.model_dump()
        if seed is not None:
            data["seed"] = seed
            data["ransac"]["seed"] = seed
        if workers is not None:
            data["workers"] = workers
        try:
            return PipelineConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid command-line override: {e}") from e
