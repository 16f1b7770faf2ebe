"""
Application Configuration Settings
"""
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="REGCD_",
        env_file=".env",
        # 自动将环境变量转换为小写
        case_sensitive=False,
        extra="ignore",
    )

    # 应用基础配置
    app_name: str = "regcd"
    app_version: str = "1.0.0"

    # 运行配置
    default_workers: int = 4
    # 未传入 --config 时使用的配置文件，为空则使用内置默认值
    default_config_path: Optional[str] = None
    # 外部插件子进程超时(秒)
    plugin_timeout: float = 600.0

    # 日志配置
    log_level: str = "INFO"
    log_format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # 获取带版本号的程序名称
    def get_program_label(self) -> str:
        return f"{self.app_name} {self.app_version}"


settings = Settings()
