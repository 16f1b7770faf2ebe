"""
影像文件读写
PNG (8-bit, 1 or 3 channels) and NetPBM P5/P6 decoding / encoding through Pillow
"""
import logging
import os
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from src.core_application.errors import ContractError, RasterDecodeError
from src.core_application.raster import Raster

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

SUPPORTED_FORMATS = {"PNG", "PPM"}
SUPPORTED_MODES = {"L": 1, "RGB": 3}
SUFFIX_FORMATS = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM", ".pnm": "PPM"}


def load_raster(path: PathLike) -> Raster:
    """
    读取 8 位 PNG 或 NetPBM 影像

    Raises:
        RasterDecodeError: 文件不可读、格式 / 位深 / 通道数不受支持或数据被截断
    """
    path = Path(path)
    if not path.is_file():
        raise RasterDecodeError(f"Cannot read image '{path}': file not found")
    try:
        with Image.open(path) as im:
            fmt = im.format
            mode = im.mode
            if fmt not in SUPPORTED_FORMATS:
                raise RasterDecodeError(f"Unsupported image format '{fmt}' in '{path}'")
            if mode not in SUPPORTED_MODES:
                raise RasterDecodeError(
                    f"Unsupported pixel mode '{mode}' in '{path}' (need 8-bit grayscale 'L' or 'RGB')"
                )
            im.load()
            data = np.asarray(im, dtype=np.uint8).copy()
    except RasterDecodeError:
        raise
    except UnidentifiedImageError as e:
        raise RasterDecodeError(f"Unrecognized image format in '{path}': {e}") from e
    except (OSError, ValueError, SyntaxError) as e:
        # Pillow 对截断 / 损坏文件抛出 OSError 或 ValueError
        raise RasterDecodeError(f"Failed to decode '{path}': {e}") from e

    logger.debug(f"Loaded {path} ({fmt}, {mode}, {data.shape[1]}x{data.shape[0]})")
    return Raster(data)


def save_raster(img: Raster, path: PathLike) -> Path:
    """按扩展名写出 PNG 或 NetPBM；.pgm 只接受单通道"""
    path = Path(path)
    fmt = SUFFIX_FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise ContractError(f"Unsupported output extension '{path.suffix}' for '{path}'")
    if path.suffix.lower() == ".pgm" and img.channels != 1:
        raise ContractError(f"PGM output needs a single-channel raster, got {img.channels} channels")
    path.parent.mkdir(parents=True, exist_ok=True)
    # uint8 (H, W) -> L, (H, W, 3) -> RGB
    Image.fromarray(np.ascontiguousarray(img.data)).save(path, format=fmt)
    return path


def save_probability_png(probs: np.ndarray, path: PathLike) -> Path:
    """概率图写为 8 位 PNG（probs × 255 四舍五入）"""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ContractError(f"Probability map must be 2-D, got shape {probs.shape}")
    return save_raster(Raster.from_float(np.clip(probs, 0.0, 1.0) * 255.0), path)
