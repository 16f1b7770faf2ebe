"""
子进程插件
External matcher / segmenter programs driven through temporary files:

    matcher:   <cmd...> <a.png> <b.png> <out.json>   -> KeypointSet JSON
    segmenter: <cmd...> <image.png> <out.json>        -> {"masks": [{"path": ...}]}

非零退出码作为处理错误向上传播。
"""
import logging
import shlex
import subprocess
import tempfile
from pathlib import Path
from typing import List, Optional, Sequence

from config.settings import settings
from src.core_application.errors import PluginError, RegCDError
from src.core_application.matchkit import KeypointSet
from src.core_application.pretrainkit import InstanceMask
from src.core_application.raster import Raster
from src.data_persistence.artifacts import read_keypoints, read_mask_list
from src.data_persistence.raster_io import load_raster, save_raster
from src.external_services.plugins import MatcherPlugin, SegmenterPlugin

logger = logging.getLogger(__name__)


def run_plugin(command: Sequence[str], timeout: Optional[float] = None) -> None:
    """运行插件程序，失败时抛出 PluginError（包含 stderr 摘要）"""
    timeout = timeout or settings.plugin_timeout
    logger.debug(f"Running plugin: {' '.join(command)}")
    try:
        proc = subprocess.run(command, capture_output=True, text=True, timeout=timeout, check=False)
    except FileNotFoundError as e:
        raise PluginError(f"Plugin program not found: {command[0]}") from e
    except subprocess.TimeoutExpired as e:
        raise PluginError(f"Plugin timed out after {timeout:.0f}s: {command[0]}") from e
    if proc.returncode != 0:
        tail = (proc.stderr or "").strip().splitlines()[-5:]
        raise PluginError(
            f"Plugin exited with code {proc.returncode}: {command[0]}"
            + (f" ({' | '.join(tail)})" if tail else "")
        )


class SubprocessMatcher(MatcherPlugin):
    """外部匹配程序"""

    name = "subprocess-matcher"

    def __init__(self, command: str, timeout: Optional[float] = None):
        self.command = shlex.split(command)
        if not self.command:
            raise PluginError("Empty matcher command")
        self.timeout = timeout

    def match(self, a: Raster, b: Raster) -> KeypointSet:
        with tempfile.TemporaryDirectory(prefix="regcd-match-") as tmp:
            tmp_dir = Path(tmp)
            path_a = save_raster(a, tmp_dir / "a.png")
            path_b = save_raster(b, tmp_dir / "b.png")
            out = tmp_dir / "out.json"
            run_plugin(self.command + [str(path_a), str(path_b), str(out)], self.timeout)
            kps = read_keypoints(out, PluginError)
        logger.debug(f"Subprocess matcher returned {len(kps)} pair(s)")
        return kps


class SubprocessSegmenter(SegmenterPlugin):
    """外部分割程序"""

    name = "subprocess-segmenter"

    def __init__(self, command: str, timeout: Optional[float] = None):
        self.command = shlex.split(command)
        if not self.command:
            raise PluginError("Empty segmenter command")
        self.timeout = timeout

    def propose(self, img: Raster) -> List[InstanceMask]:
        with tempfile.TemporaryDirectory(prefix="regcd-seg-") as tmp:
            tmp_dir = Path(tmp)
            image_path = save_raster(img, tmp_dir / "image.png")
            out = tmp_dir / "out.json"
            run_plugin(self.command + [str(image_path), str(out)], self.timeout)
            masks = []
            for mask_path in read_mask_list(out):
                try:
                    mask = InstanceMask(load_raster(mask_path))
                except RegCDError as e:
                    raise PluginError(f"Invalid mask '{mask_path.name}' from segmenter: {e}") from e
                if mask.mask.shape != img.shape:
                    raise PluginError(
                        f"Mask '{mask_path.name}' is {mask.mask.width}x{mask.mask.height}, "
                        f"expected {img.width}x{img.height}"
                    )
                masks.append(mask)
        return masks
