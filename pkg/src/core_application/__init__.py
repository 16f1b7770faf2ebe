"""
Core Application Layer Package

主要组件：
- raster / geomest: 影像容器、单应性估计与公共区域几何
- featpyr / matchkit: 特征金字塔与分层匹配
- pretrainkit: 实例生成、增强视图与自蒸馏损失
- changekit / evalbench: 变化检测、指标与合成基准

子模块按需导入；此处只导出错误类型。
"""

from .errors import (
    AssemblyError, ConfigurationError, ContractError, DegeneracyError, EstimationError,
    GeometryError, InsufficientDataError, NumericError, PluginError, RasterDecodeError, RegCDError,
)

__all__ = [
    "RegCDError", "ConfigurationError", "ContractError", "RasterDecodeError", "AssemblyError",
    "GeometryError", "DegeneracyError", "InsufficientDataError", "EstimationError",
    "NumericError", "PluginError",
]
