"""
Data Persistence Layer Package
"""

# 影像读写
from .raster_io import load_raster, save_probability_png, save_raster

# 产物模型与写入器
from .artifacts import (
    ArtifactWriter, HomographyModel, KeypointSetModel, MetricsReport, PolygonModel,
    read_homography, read_keypoints, read_polygon,
)

__all__ = [
    "load_raster", "save_raster", "save_probability_png",
    "ArtifactWriter", "HomographyModel", "KeypointSetModel", "MetricsReport", "PolygonModel",
    "read_homography", "read_keypoints", "read_polygon",
]
