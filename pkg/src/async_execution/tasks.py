"""
Stage runners for batch execution
warpgen / register / detect / pipeline / eval / instances / bench

每个 runner 读取输入文件、调用核心模块并写出产物；失败时记录日志后重新抛出，
由 CLI 统一转换为退出码。
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from src.async_execution.worker_manager import WorkerManager
from src.config.config_manager import PipelineConfigManager
from src.config.pipeline_config import PipelineConfig
from src.core_application.changekit import ChangeMap, apply_overlap_mask, detect_changes, weighted_bce
from src.core_application.errors import RegCDError
from src.core_application.evalbench import (
    COMPOSITION_ORDER, BenchScenario, build_corpus, confusion, draw_distortion, generate_scenario,
    metrics, registration_error,
)
from src.core_application.featpyr import default_filter_bank
from src.core_application.geomest import (
    Homography, OverlapPolygon, overlap_polygon, polygon_mask, ransac_homography,
)
from src.core_application.matchkit import KeypointSet, fused_maps, match_levels, union_keypoints
from src.core_application.pretrainkit import extract_instance, instance_inventory, make_view_pair
from src.core_application.raster import Raster, warp_raster
from src.data_persistence.artifacts import (
    ArtifactWriter, ConfusionModel, DistortionSpecModel, InventoryRecord, MetricsReport, RegisterReport,
    homography_to_model, keypoints_to_model, polygon_to_model, read_polygon,
)
from src.data_persistence.raster_io import load_raster
from src.external_services.plugins import create_classifier, create_matcher, create_segmenter

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegistrationOutcome:
    homography: Homography
    registered: Raster
    validity: Raster
    overlap: OverlapPolygon
    keypoints: KeypointSet
    level_counts: Dict[int, int]
    inliers: int
    iterations: int


def _metrics_report(
    pred: Raster,
    gt: Raster,
    mask: Optional[Raster] = None,
    change: Optional[ChangeMap] = None,
    omega: Optional[float] = None,
) -> MetricsReport:
    """混淆矩阵指标；给定 change 与 omega 时附带评估区域内概率图的加权交叉熵"""
    counts = confusion(pred, gt, mask)
    m = metrics(counts)
    bce = None
    if change is not None and omega is not None:
        region = np.ones(change.probs.shape, dtype=bool) if mask is None else mask.data > 0
        if region.any():
            target = (gt.data > 0).astype(np.float64)
            bce = weighted_bce(change.probs[region], target[region], omega)
    return MetricsReport(
        precision=m.precision, recall=m.recall, f1=m.f1, iou=m.iou, oa=m.oa,
        confusion=ConfusionModel(**counts.as_dict()), weighted_bce=bce,
    )


def _save_config(config: PipelineConfig, writer: ArtifactWriter) -> None:
    writer.adopt(PipelineConfigManager().save_resolved(config, str(writer.out_dir)))


# ==================== 内存内流程 ====================

def register_images(t1: Raster, t2: Raster, config: PipelineConfig, workers: Optional[WorkerManager] = None) -> RegistrationOutcome:
    """分层匹配 -> RANSAC -> 重采样 -> 公共区域"""
    workers = workers or WorkerManager(config.workers)
    bank = default_filter_bank(config.matching.filter_sigma)
    per_level = match_levels(t1, t2, create_matcher(config), bank, config.matching.levels, workers)
    kps = union_keypoints([per_level[lv] for lv in sorted(per_level)], config.matching.dedup_radius)
    logger.info(f"🔗 Hierarchical union: {len(kps)} keypoint pair(s)")

    result = ransac_homography(kps, config.ransac)
    warped = warp_raster(t2, result.homography, t1.width, t1.height)
    poly = overlap_polygon(t1.width, t1.height, t2.width, t2.height, result.homography)
    return RegistrationOutcome(
        homography=result.homography,
        registered=warped.image,
        validity=warped.validity,
        overlap=poly,
        keypoints=kps,
        level_counts={lv: len(k) for lv, k in per_level.items()},
        inliers=result.inlier_count,
        iterations=result.iterations,
    )


def detect_images(
    t1: Raster,
    t2_registered: Raster,
    validity: Raster,
    config: PipelineConfig,
    overlap: Optional[OverlapPolygon] = None,
    workers: Optional[WorkerManager] = None,
) -> ChangeMap:
    """分块变化检测，给定 overlap 时再乘以公共区域掩膜"""
    workers = workers or WorkerManager(config.workers)
    segmenter = create_segmenter(config) if config.detection.guidance else None
    change = detect_changes(
        t1, t2_registered, validity, create_classifier(config), segmenter,
        tile_size=config.tile_size, threshold=config.threshold, workers=workers,
    )
    if overlap is not None:
        change = apply_overlap_mask(change, polygon_mask(overlap, t1.width, t1.height))
    return change


# ==================== 文件级 runner ====================

def run_warpgen(
    t1_path: str, t2_path: str, gt_path: str, level: int, config: PipelineConfig, out_dir: str
) -> BenchScenario:
    """生成场景包：t1.png, t2_distorted.png, gt_change.png, gt_h.json, spec.json，畸变由 config.seed 抽取"""
    logger.info(f"🚀 warpgen level={level} seed={config.seed}")
    t1, t2, gt = load_raster(t1_path), load_raster(t2_path), load_raster(gt_path)
    scenario = generate_scenario(t1, t2, gt, draw_distortion(level, config.seed))
    with ArtifactWriter(out_dir) as writer:
        _save_config(config, writer)
        write_bundle(scenario, writer)
    logger.info(f"✅ Scenario bundle written to {out_dir}")
    return scenario


def write_bundle(scenario: BenchScenario, writer: ArtifactWriter) -> None:
    spec = scenario.spec
    writer.write_raster("t1.png", scenario.t1)
    writer.write_raster("t2_distorted.png", scenario.t2_distorted)
    writer.write_raster("gt_change.png", scenario.gt_change)
    writer.write_json("gt_h.json", homography_to_model(scenario.gt_homography))
    writer.write_json("spec.json", DistortionSpecModel(
        level=spec.level, rotation_deg=spec.rotation_deg, shift_frac=spec.shift_frac,
        seed=spec.seed, composition=COMPOSITION_ORDER,
    ))


def run_register(
    t1_path: str, t2_path: str, config: PipelineConfig, out_dir: str, export_fused: bool = False
) -> RegistrationOutcome:
    """配准并写出 h.json, t2_registered.png, overlap.json, validity.png, keypoints.json"""
    logger.info(f"🚀 register {t1_path} <- {t2_path}")
    t1, t2 = load_raster(t1_path), load_raster(t2_path)
    with ArtifactWriter(out_dir) as writer:
        try:
            outcome = register_images(t1, t2, config)
        except RegCDError as e:
            logger.error(f"❌ Registration failed: {e}")
            raise
        _save_config(config, writer)
        writer.write_json("h.json", homography_to_model(outcome.homography))
        writer.write_raster("t2_registered.png", outcome.registered)
        writer.write_raster("validity.png", outcome.validity)
        writer.write_json("overlap.json", polygon_to_model(outcome.overlap))
        writer.write_json("keypoints.json", keypoints_to_model(outcome.keypoints))
        counts = {str(lv): n for lv, n in sorted(outcome.level_counts.items())}
        counts["union"] = len(outcome.keypoints)
        writer.write_json("register_report.json", RegisterReport(
            keypoints=counts, inliers=outcome.inliers, iterations=outcome.iterations,
            overlap_area=outcome.overlap.area,
        ))
        if export_fused:
            bank = default_filter_bank(config.matching.filter_sigma)
            for epoch, img in (("t1", t1), ("t2", t2)):
                for scale, fused in fused_maps(img, bank).items():
                    writer.write_raster(f"fused_{epoch}_x{scale}.png", fused)
    logger.info(
        f"✅ Registration done: {outcome.inliers} inliers, overlap area {outcome.overlap.area:.1f} px²"
    )
    return outcome


def run_detect(
    t1_path: str,
    t2_registered_path: str,
    validity_path: str,
    config: PipelineConfig,
    out_dir: str,
    overlap_path: Optional[str] = None,
) -> ChangeMap:
    """变化检测并写出 change_map.png 与 probs.png"""
    logger.info(f"🚀 detect {t1_path} vs {t2_registered_path}")
    t1 = load_raster(t1_path)
    t2 = load_raster(t2_registered_path)
    validity = load_raster(validity_path)
    overlap = read_polygon(overlap_path) if overlap_path else None
    with ArtifactWriter(out_dir) as writer:
        change = detect_images(t1, t2, validity, config, overlap)
        _save_config(config, writer)
        writer.write_raster("change_map.png", change.binary)
        writer.write_probs("probs.png", change.probs)
    return change


def run_pipeline(
    t1_path: str, t2_path: str, config: PipelineConfig, out_dir: str, gt_path: Optional[str] = None
) -> Dict[str, Any]:
    """register 后以其产物运行 detect --overlap；给定 gt 时在公共区域内计算指标"""
    out = Path(out_dir)
    outcome = run_register(t1_path, t2_path, config, out_dir)
    change = run_detect(
        t1_path, str(out / "t2_registered.png"), str(out / "validity.png"), config, out_dir,
        overlap_path=str(out / "overlap.json"),
    )
    summary: Dict[str, Any] = {"inliers": outcome.inliers, "overlap_area": outcome.overlap.area}
    if gt_path:
        gt = load_raster(gt_path)
        mask = polygon_mask(outcome.overlap, change.width, change.height)
        report = _metrics_report(change.binary, gt, mask, change, config.omega)
        with ArtifactWriter(out_dir) as writer:
            writer.write_json("metrics.json", report)
        summary["metrics"] = report.model_dump()
        logger.info(f"📊 Pipeline F1 inside overlap: {report.f1:.4f}")
    return summary


def run_eval(
    pred_path: str, gt_path: str, config: PipelineConfig, out_dir: str, mask_path: Optional[str] = None
) -> MetricsReport:
    pred, gt = load_raster(pred_path), load_raster(gt_path)
    mask = load_raster(mask_path) if mask_path else None
    report = _metrics_report(pred, gt, mask)
    with ArtifactWriter(out_dir) as writer:
        _save_config(config, writer)
        writer.write_json("metrics.json", report)
    logger.info(f"📊 F1={report.f1:.4f} IoU={report.iou:.4f} OA={report.oa:.4f}")
    return report


def run_instances(image_path: str, config: PipelineConfig, out_dir: str) -> List[InventoryRecord]:
    """候选掩膜 -> 比例过滤 -> 实例与两个增强视图，写出 inventory.json"""
    img = load_raster(image_path)
    masks = create_segmenter(config).propose(img)
    records = []
    with ArtifactWriter(out_dir) as writer:
        _save_config(config, writer)
        for entry, mask in zip(instance_inventory(masks), masks):
            record = InventoryRecord(**entry)
            if record.kept:
                mask_name = f"mask_{record.id:04d}.png"
                writer.write_raster(mask_name, mask.mask)
                instance = extract_instance(img, mask)
                writer.write_raster(f"instance_{record.id:04d}.png", instance)
                views = make_view_pair(instance, [config.seed, record.id])
                for k, view in enumerate(views, start=1):
                    name = f"instance_{record.id:04d}_view{k}.png"
                    writer.write_raster(name, view)
                    record.views.append(name)
                record.path = mask_name
            records.append(record)
        writer.write_json("inventory.json", [r.model_dump() for r in records])
    kept = sum(1 for r in records if r.kept)
    logger.info(f"✅ {kept}/{len(records)} proposal(s) kept as instances")
    return records


def run_bench(
    config: PipelineConfig, out_dir: str, n_scenes: int = 4, size: int = 512, levels: Sequence[int] = (1, 2, 3)
) -> Dict[str, Any]:
    """合成基准：每个畸变场景跑完整流程，并在对齐场景上单独跑检测"""
    workers = WorkerManager(config.workers)
    corpus = build_corpus(n_scenes, levels, size, config.seed)
    rows: List[Dict[str, Any]] = []
    with ArtifactWriter(out_dir) as writer:
        _save_config(config, writer)
        for scenario in corpus:
            rows.append(_bench_scenario(scenario, config, workers, writer))
        report = {"scenarios": rows, "levels": _level_means(rows)}
        writer.write_json("bench_report.json", report)
    return report


def _bench_scenario(
    scenario: BenchScenario, config: PipelineConfig, workers: WorkerManager, writer: ArtifactWriter
) -> Dict[str, Any]:
    bundle = ArtifactWriter(writer.out_dir / "scenarios" / scenario.name)
    with bundle:
        write_bundle(scenario, bundle)
    for path in bundle.written:
        writer.adopt(path)

    row: Dict[str, Any] = {"name": scenario.name, "level": scenario.spec.level}
    full = Raster.full(scenario.t1.width, scenario.t1.height, 255)
    aligned = detect_images(scenario.t1, scenario.t2_aligned, full, config, workers=workers)
    row["aligned"] = _metrics_report(aligned.binary, scenario.gt_change, None, aligned, config.omega).model_dump()
    try:
        outcome = register_images(scenario.t1, scenario.t2_distorted, config, workers)
    except RegCDError as e:
        logger.warning(f"⚠️ {scenario.name}: registration failed: {e}")
        row.update(status="failed", error=str(e))
        return row

    mean_px, max_px = registration_error(
        outcome.homography, scenario.gt_homography, scenario.t1.width, scenario.t1.height
    )
    change = detect_images(
        scenario.t1, outcome.registered, outcome.validity, config, outcome.overlap, workers
    )
    mask = polygon_mask(outcome.overlap, scenario.t1.width, scenario.t1.height)
    row.update(
        status="ok",
        registration_error={"mean_px": mean_px, "max_px": max_px},
        keypoints={str(lv): n for lv, n in sorted(outcome.level_counts.items())},
        inliers=outcome.inliers,
        distorted=_metrics_report(change.binary, scenario.gt_change, mask, change, config.omega).model_dump(),
    )
    logger.info(
        f"📊 {scenario.name}: registration error {mean_px:.2f}px mean, "
        f"F1 {row['distorted']['f1']:.4f} (aligned {row['aligned']['f1']:.4f})"
    )
    return row


def _level_means(rows: List[Dict[str, Any]]) -> Dict[str, Dict[str, Any]]:
    levels: Dict[str, Dict[str, Any]] = {}
    for level in sorted({r["level"] for r in rows}):
        group = [r for r in rows if r["level"] == level]
        ok = [r for r in group if r.get("status") == "ok"]
        entry: Dict[str, Any] = {
            "scenarios": len(group),
            "registered": len(ok),
            "aligned_f1": float(np.mean([r["aligned"]["f1"] for r in group])),
        }
        if ok:
            entry["mean_registration_error_px"] = float(np.mean([r["registration_error"]["mean_px"] for r in ok]))
            entry["distorted_f1"] = float(np.mean([r["distorted"]["f1"] for r in ok]))
            entry["distorted_iou"] = float(np.mean([r["distorted"]["iou"] for r in ok]))
            entry["distorted_oa"] = float(np.mean([r["distorted"]["oa"] for r in ok]))
        levels[str(level)] = entry
    return levels
