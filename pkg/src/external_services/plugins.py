"""
可插拔组件
Matcher / segmenter / classifier plugin interfaces, their built-in implementations
and the factory resolving "builtin" or a subprocess command line.
"""
import logging
from abc import ABC, abstractmethod
from typing import List, Optional

import numpy as np

from src.config.pipeline_config import DetectionConfig, MatchingConfig, PipelineConfig
from src.core_application.changekit import baseline_score
from src.core_application.errors import NumericError
from src.core_application.matchkit import KeypointSet, builtin_match
from src.core_application.pretrainkit import InstanceMask, builtin_segment, foreground
from src.core_application.raster import Raster

logger = logging.getLogger(__name__)

BUILTIN = "builtin"


class MatcherPlugin(ABC):
    """匹配器抽象基类：返回 source_scale 为 1 的对应点"""

    name: str = "matcher"
    thread_safe: bool = True

    @abstractmethod
    def match(self, a: Raster, b: Raster) -> KeypointSet:
        pass


class SegmenterPlugin(ABC):
    """类别无关分割器抽象基类"""

    name: str = "segmenter"
    thread_safe: bool = True

    @abstractmethod
    def propose(self, img: Raster) -> List[InstanceMask]:
        pass

    def guide(self, img: Raster) -> Raster:
        """所有候选掩膜的并集（0/255）"""
        union = np.zeros((img.height, img.width), dtype=bool)
        for m in self.propose(img):
            union |= m.mask.data == 255
        return Raster(np.where(union, 255, 0).astype(np.uint8))


class ClassifierPlugin(ABC):
    """变化分类器抽象基类：输出与瓦片同尺寸的 [0, 1] 概率"""

    name: str = "classifier"
    thread_safe: bool = True

    @abstractmethod
    def score(
        self, tile1: Raster, tile2: Raster, guide1: Optional[Raster], guide2: Optional[Raster]
    ) -> np.ndarray:
        pass


class BuiltinMatcher(MatcherPlugin):
    """角点 + 方向归一化块描述子 + 互为最近邻"""

    name = "builtin-matcher"

    def __init__(self, cfg: Optional[MatchingConfig] = None):
        self.cfg = cfg or MatchingConfig()

    def match(self, a: Raster, b: Raster) -> KeypointSet:
        return builtin_match(
            a, b,
            max_corners=self.cfg.max_corners,
            nms_radius=self.cfg.nms_radius,
            patch_size=self.cfg.patch_size,
            ratio=self.cfg.ratio,
        )


class BuiltinSegmenter(SegmenterPlugin):
    """自适应均值阈值 + 4 连通域"""

    name = "builtin-segmenter"

    def __init__(self, window: int = 31, offset: float = 5.0, global_fallback: bool = True):
        self.window = window
        self.offset = offset
        self.global_fallback = global_fallback

    def propose(self, img: Raster) -> List[InstanceMask]:
        return builtin_segment(img, self.window, self.offset, self.global_fallback)

    def guide(self, img: Raster) -> Raster:
        # 连通域的并集就是前景本身
        mask = foreground(img, self.window, self.offset, self.global_fallback)
        return Raster(np.where(mask, 255, 0).astype(np.uint8))


class BuiltinClassifier(ClassifierPlugin):
    """局部标准化差异 + 引导融合"""

    name = "builtin-classifier"

    def __init__(self, cfg: Optional[DetectionConfig] = None):
        self.cfg = cfg or DetectionConfig()

    def score(
        self, tile1: Raster, tile2: Raster, guide1: Optional[Raster], guide2: Optional[Raster]
    ) -> np.ndarray:
        probs = baseline_score(
            tile1, tile2, guide1, guide2,
            alpha=self.cfg.alpha,
            sigma=self.cfg.smoothing_sigma,
            saturation=self.cfg.saturation,
            normalization=self.cfg.normalization,
            tolerance=self.cfg.shift_tolerance,
        )
        if not np.all(np.isfinite(probs)):
            raise NumericError("Classifier produced non-finite probabilities")
        return probs


def create_matcher(config: PipelineConfig) -> MatcherPlugin:
    """根据配置创建匹配器"""
    if config.matcher == BUILTIN:
        return BuiltinMatcher(config.matching)
    from src.external_services.subprocess_plugin import SubprocessMatcher
    logger.info(f"Using subprocess matcher: {config.matcher}")
    return SubprocessMatcher(config.matcher)


def create_segmenter(config: PipelineConfig) -> SegmenterPlugin:
    """根据配置创建分割器"""
    if config.segmenter == BUILTIN:
        return BuiltinSegmenter(config.segmenter_window, config.segmenter_offset, config.segmenter_global_fallback)
    from src.external_services.subprocess_plugin import SubprocessSegmenter
    logger.info(f"Using subprocess segmenter: {config.segmenter}")
    return SubprocessSegmenter(config.segmenter)


def create_classifier(config: PipelineConfig) -> ClassifierPlugin:
    return BuiltinClassifier(config.detection)
