"""
产物读写
Pydantic wire models and JSON codecs for keypoints, homographies, overlap polygons,
metrics, scenario bundles and instance inventories, plus the ArtifactWriter that
tracks written files so a failed run can be rolled back.
"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.core_application.errors import ContractError, GeometryError, PluginError, RegCDError
from src.core_application.geomest import Homography, OverlapPolygon
from src.core_application.matchkit import KeypointSet
from src.core_application.raster import Raster
from src.data_persistence.raster_io import save_probability_png, save_raster

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


# ==================== 线格式模型 ====================

class KeypointPairModel(BaseModel):
    model_config = ConfigDict(extra="ignore")

    t1: Tuple[float, float]
    t2: Tuple[float, float]
    conf: float = Field(default=1.0, ge=0, le=1)
    scale: int = 1

    @field_validator("scale")
    @classmethod
    def validate_scale(cls, v: int) -> int:
        if v not in (1, 2, 4):
            raise ValueError(f"scale must be 1, 2 or 4, got {v}")
        return v


class KeypointSetModel(BaseModel):
    pairs: List[KeypointPairModel] = Field(default_factory=list)


class HomographyModel(BaseModel):
    h: List[List[float]]

    @field_validator("h")
    @classmethod
    def validate_shape(cls, v: List[List[float]]) -> List[List[float]]:
        if len(v) != 3 or any(len(row) != 3 for row in v):
            raise ValueError("h must be a 3x3 matrix")
        return v


class PolygonModel(BaseModel):
    vertices: List[Tuple[float, float]] = Field(default_factory=list)


class ConfusionModel(BaseModel):
    tp: int = Field(ge=0)
    fp: int = Field(ge=0)
    fn: int = Field(ge=0)
    tn: int = Field(ge=0)


class MetricsReport(BaseModel):
    precision: float
    recall: float
    f1: float
    iou: float
    oa: float
    confusion: ConfusionModel
    weighted_bce: Optional[float] = None


class DistortionSpecModel(BaseModel):
    level: int
    rotation_deg: float
    shift_frac: Tuple[float, float]
    seed: int
    composition: str = "rotation-then-shift"


class RegisterReport(BaseModel):
    keypoints: Dict[str, int]
    inliers: int
    iterations: int
    overlap_area: float


class InventoryRecord(BaseModel):
    id: int
    pixel_portion: float
    kept: bool
    path: Optional[str] = None
    views: List[str] = Field(default_factory=list)


# ==================== 编解码 ====================

def keypoints_to_model(kps: KeypointSet) -> KeypointSetModel:
    return KeypointSetModel(pairs=[
        KeypointPairModel(t1=a, t2=b, conf=min(max(c, 0.0), 1.0), scale=s) for a, b, c, s in kps.pairs()
    ])


def keypoints_from_model(model: KeypointSetModel) -> KeypointSet:
    return KeypointSet.from_pairs((p.t1, p.t2, p.conf, p.scale) for p in model.pairs)


def homography_to_model(h: Homography) -> HomographyModel:
    return HomographyModel(h=h.to_list())


def homography_from_model(model: HomographyModel) -> Homography:
    return Homography(model.h)


def polygon_to_model(poly: OverlapPolygon) -> PolygonModel:
    return PolygonModel(vertices=[tuple(v) for v in poly.to_list()])


def polygon_from_model(model: PolygonModel) -> OverlapPolygon:
    if 0 < len(model.vertices) < 3:
        raise GeometryError(f"Polygon needs at least 3 vertices, got {len(model.vertices)}")
    return OverlapPolygon(tuple((float(x), float(y)) for x, y in model.vertices))


def dump_json(data: Union[BaseModel, Dict[str, Any], List[Any]], path: PathLike) -> Path:
    """确定性 JSON 输出（固定缩进、UTF-8、末尾换行）"""
    path = Path(path)
    payload = data.model_dump(mode="json") if isinstance(data, BaseModel) else data
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False)
        f.write("\n")
    return path


def load_model(model_cls, path: PathLike, error_cls=ContractError):
    """读取 JSON 并校验为 model_cls，失败时抛出 error_cls"""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return model_cls.model_validate(data)
    except FileNotFoundError as e:
        raise error_cls(f"File not found: {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise error_cls(f"Cannot parse JSON '{path}': {e}") from e
    except ValidationError as e:
        raise error_cls(f"Invalid {model_cls.__name__} in '{path}': {e.error_count()} error(s): {e}") from e


def read_keypoints(path: PathLike, error_cls=ContractError) -> KeypointSet:
    return keypoints_from_model(load_model(KeypointSetModel, path, error_cls))


def read_homography(path: PathLike) -> Homography:
    return homography_from_model(load_model(HomographyModel, path))


def read_polygon(path: PathLike) -> OverlapPolygon:
    return polygon_from_model(load_model(PolygonModel, path))


def read_mask_list(path: PathLike) -> List[Path]:
    """分割器子进程输出：{"masks": [{"path": ...}]}，路径相对于 JSON 文件"""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        entries = data["masks"]
        return [(path.parent / entry["path"]).resolve() for entry in entries]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise PluginError(f"Invalid segmenter output '{path}': {e}") from e


# ==================== 产物写出 ====================

class ArtifactWriter:
    """
    输出目录写入器

    记录每个写出的文件；在 with 块内发生异常时删除本次写出的所有文件。
    """

    def __init__(self, out_dir: PathLike):
        self.out_dir = Path(out_dir)
        self.written: List[Path] = []
        self._created_dir = False

    def __enter__(self) -> "ArtifactWriter":
        if not self.out_dir.exists():
            self._created_dir = True
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is not None and issubclass(exc_type, (RegCDError, OSError, ValueError)):
            self.rollback()
        return False

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def _track(self, path: Path) -> Path:
        if path not in self.written:
            self.written.append(path)
        return path

    def write_json(self, name: str, data: Union[BaseModel, Dict[str, Any], List[Any]]) -> Path:
        return self._track(dump_json(data, self.path(name)))

    def write_raster(self, name: str, img: Raster) -> Path:
        return self._track(save_raster(img, self.path(name)))

    def write_probs(self, name: str, probs: np.ndarray) -> Path:
        return self._track(save_probability_png(probs, self.path(name)))

    def adopt(self, path: PathLike) -> Path:
        """登记由其他组件写出的文件"""
        return self._track(Path(path))

    def rollback(self) -> None:
        """删除已写出的文件"""
        for path in reversed(self.written):
            try:
                path.unlink()
            except FileNotFoundError:
                pass
            except OSError as e:
                logger.warning(f"⚠️ Could not remove partial artifact {path}: {e}")
        if self.written:
            logger.info(f"Removed {len(self.written)} partial artifact(s) from {self.out_dir}")
        self.written.clear()
        if self._created_dir:
            try:
                self.out_dir.rmdir()
            except OSError:
                pass
