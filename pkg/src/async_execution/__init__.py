"""
Async Execution Layer Package
"""

from .worker_manager import WorkerManager
from .tasks import (
    detect_images, register_images, run_bench, run_detect, run_eval, run_instances, run_pipeline,
    run_register, run_warpgen,
)

__all__ = [
    "WorkerManager",
    "register_images", "detect_images",
    "run_warpgen", "run_register", "run_detect", "run_pipeline", "run_eval", "run_instances", "run_bench",
]
