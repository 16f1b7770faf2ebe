"""
统一配置文件管理器
用于加载和保存流程配置 JSON 文件，每次加载都重新读取文件
"""
import json
import logging
import os
from typing import Any, Dict, Optional

from pydantic import ValidationError

from src.config.pipeline_config import PipelineConfig
from src.core_application.errors import ConfigurationError

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.json"


class ConfigManager:
    """通用配置文件管理器"""

    def __init__(self, config_file: str, config_name: str = "Config"):
        self.config_file = config_file
        self.config_name = config_name

    def get_config_path(self) -> str:
        """获取配置文件的绝对路径"""
        if os.path.isabs(self.config_file) or os.path.exists(self.config_file):
            return os.path.abspath(self.config_file)

        # 从项目根目录开始查找
        current_dir = os.path.dirname(os.path.abspath(__file__))
        while current_dir != os.path.dirname(current_dir):
            config_path = os.path.join(current_dir, self.config_file)
            if os.path.exists(config_path):
                return config_path
            current_dir = os.path.dirname(current_dir)

        return os.path.abspath(self.config_file)

    def load_config(self) -> Dict[str, Any]:
        """加载配置文件"""
        config_path = self.get_config_path()
        logger.info(f"Loading {self.config_name} from: {config_path}")

        if not os.path.exists(config_path):
            raise ConfigurationError(f"{self.config_name} file not found: {config_path}")

        try:
            with open(config_path, "r", encoding="utf-8") as f:
                config_data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"{self.config_name} file is not valid JSON: {e}") from e
        if not isinstance(config_data, dict):
            raise ConfigurationError(f"{self.config_name} must be a JSON object")

        logger.info(f"✅ {self.config_name} loaded successfully")
        return config_data

    def save_config(self, config_data: Dict[str, Any], path: Optional[str] = None) -> str:
        """保存配置文件，返回写入路径"""
        config_path = path or self.get_config_path()

        # 确保目录存在
        os.makedirs(os.path.dirname(os.path.abspath(config_path)), exist_ok=True)

        with open(config_path, "w", encoding="utf-8") as f:
            json.dump(config_data, f, indent=2, ensure_ascii=False, sort_keys=True)
            f.write("\n")

        logger.info(f"✅ {self.config_name} saved to {config_path}")
        return config_path


class PipelineConfigManager(ConfigManager):
    """流程配置管理器，未指定文件时全部使用默认值"""

    def __init__(self, config_file: Optional[str] = None):
        super().__init__(config_file or "", "Pipeline config")
        self.explicit = config_file is not None

    def load_pipeline_config(self) -> PipelineConfig:
        data = self.load_config() if self.explicit else {}
        try:
            return PipelineConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid pipeline config: {_describe(e)}") from e

    def save_resolved(self, config: PipelineConfig, out_dir: str) -> str:
        """在输出目录旁写出解析后的完整配置"""
        return self.save_config(config.model_dump(mode="json"), os.path.join(out_dir, RESOLVED_CONFIG_NAME))


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        loc = ".".join(str(p) for p in item.get("loc", ())) or "<root>"
        parts.append(f"{loc}: {item.get('msg')}")
    return "; ".join(parts)
