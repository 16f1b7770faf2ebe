"""
错误类型定义
Error hierarchy for the registration / change detection toolkit

所有模块只抛出这里定义的异常，CLI 统一映射为退出码。
"""


class RegCDError(Exception):
    """工具包异常基类"""


class ConfigurationError(RegCDError, ValueError):
    """配置错误（取值越界、配置文件缺失或格式错误）"""


class ContractError(RegCDError, ValueError):
    """调用约定被破坏（尺寸不一致、参数越界等）"""


class RasterDecodeError(RegCDError):
    """图像解码失败"""


class AssemblyError(RegCDError):
    """瓦片拼接失败（缺失或重复的瓦片原点）"""


class GeometryError(RegCDError):
    """几何计算错误（奇异矩阵、点映射到无穷远）"""


class DegeneracyError(GeometryError):
    """退化的点配置（共线、设计矩阵秩不足）"""


class InsufficientDataError(GeometryError):
    """对应点数量不足"""


class EstimationError(RegCDError):
    """鲁棒估计失败（RANSAC 找不到足够内点）"""


class NumericError(RegCDError, ArithmeticError):
    """数值异常（NaN / Inf）"""


class PluginError(RegCDError):
    """外部插件调用失败"""


EXIT_OK = 0
EXIT_PROCESSING = 1
EXIT_USAGE = 2


def exit_code_for(error: BaseException) -> int:
    """根据异常类型返回 CLI 退出码"""
    if isinstance(error, ConfigurationError):
        return EXIT_USAGE
    return EXIT_PROCESSING
