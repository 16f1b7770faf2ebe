"""
Background Worker Manager
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Iterable, List, Optional, TypeVar

from config.settings import settings

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class WorkerManager:
    """有界线程池，结果按输入顺序合并"""

    def __init__(self, worker_count: Optional[int] = None):
        # 使用配置文件中的默认值
        self.worker_count = max(1, worker_count or settings.default_workers)
        self.tasks_submitted = 0

    def map_ordered(
        self,
        fn: Callable[[T], R],
        items: Iterable[T],
        thread_safe: bool = True,
    ) -> List[R]:
        """
        并发执行 fn 并按 items 的顺序返回结果

        Args:
            fn: 任务函数
            items: 输入序列
            thread_safe: False 时串行执行（插件声明非线程安全）

        Returns:
            List[R]: 与 items 一一对应的结果；任一任务失败则抛出其异常
        """
        items = list(items)
        self.tasks_submitted += len(items)
        if not items:
            return []
        if not thread_safe or self.worker_count == 1 or len(items) == 1:
            return [fn(item) for item in items]

        with ThreadPoolExecutor(max_workers=min(self.worker_count, len(items))) as pool:
            futures = [pool.submit(fn, item) for item in items]
            results = []
            for index, future in enumerate(futures):
                try:
                    results.append(future.result())
                except Exception as e:
                    logger.error(f"❌ Worker task {index + 1}/{len(items)} failed: {e}")
                    for pending in futures[index + 1:]:
                        pending.cancel()
                    raise
            return results

    def get_worker_status(self) -> Dict[str, Any]:
        """获取Worker状态"""
        return {
            "worker_count": self.worker_count,
            "tasks_submitted": self.tasks_submitted,
        }
