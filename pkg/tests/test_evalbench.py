"""
评估指标、畸变协议与合成场景测试
"""
import math

import numpy as np
import pytest

from src.async_execution.tasks import detect_images, register_images
from src.config.pipeline_config import PipelineConfig
from src.core_application.errors import ContractError
from src.core_application.evalbench import (
    LEVEL_BOUNDS, ConfusionCounts, DistortionSpec, build_corpus, confusion, distortion_homography,
    draw_distortion, generate_scenario, metrics, registration_error, synthesize_scene,
)
from src.core_application.geomest import Homography, apply_h, polygon_mask
from src.core_application.raster import Raster


class TestMetrics:

    def test_reference_counts(self):
        m = metrics(ConfusionCounts(tp=50, fp=10, fn=10, tn=930))
        assert m.precision == pytest.approx(0.8333, abs=1e-4)
        assert m.recall == pytest.approx(0.8333, abs=1e-4)
        assert m.f1 == pytest.approx(0.8333, abs=1e-4)
        assert m.iou == pytest.approx(0.7143, abs=1e-4)
        assert m.oa == pytest.approx(0.98)

    def test_zero_over_zero_is_zero(self):
        m = metrics(ConfusionCounts(tn=100))
        assert (m.precision, m.recall, m.f1, m.iou) == (0.0, 0.0, 0.0, 0.0)
        assert m.oa == 1.0

    def test_all_zero_counts(self):
        assert metrics(ConfusionCounts()) == (0.0, 0.0, 0.0, 0.0, 0.0)

    def test_f1_iou_relation(self):
        rng = np.random.default_rng(5)
        for tp, fp, fn, tn in rng.integers(0, 1_000_000, size=(100_000, 4)):
            m = metrics(ConfusionCounts(int(tp), int(fp), int(fn), int(tn)))
            assert abs(m.f1 - 2 * m.iou / (1 + m.iou)) <= 1e-12

    def test_negative_count(self):
        with pytest.raises(ContractError):
            ConfusionCounts(tp=-1)


class TestConfusion:

    def test_counts(self):
        pred = Raster(np.array([[255, 255, 0, 0]], dtype=np.uint8))
        gt = Raster(np.array([[255, 0, 255, 0]], dtype=np.uint8))
        assert confusion(pred, gt) == ConfusionCounts(tp=1, fp=1, fn=1, tn=1)

    def test_eval_mask_excludes_pixels(self):
        pred = Raster(np.array([[255, 255, 0, 0]], dtype=np.uint8))
        gt = Raster(np.array([[255, 0, 255, 0]], dtype=np.uint8))
        mask = Raster(np.array([[255, 0, 0, 255]], dtype=np.uint8))
        counts = confusion(pred, gt, mask)
        assert counts == ConfusionCounts(tp=1, tn=1)
        assert counts.total == 2

    def test_perfect_prediction(self):
        gt = Raster(np.where(np.random.default_rng(0).random((16, 16)) > 0.6, 255, 0).astype(np.uint8))
        m = metrics(confusion(gt, gt))
        assert m.f1 == m.iou == m.oa == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            confusion(Raster.zeros(8, 8), Raster.zeros(8, 9))

    def test_rgb_rejected(self):
        with pytest.raises(ContractError):
            confusion(Raster.zeros(8, 8, channels=3), Raster.zeros(8, 8, channels=3))


class TestDistortion:

    def test_zero_distortion_is_identity(self):
        h = distortion_homography(DistortionSpec(1, 0.0, (0.0, 0.0)), 256, 256)
        np.testing.assert_allclose(h.m, np.eye(3), atol=1e-12)

    def test_shift_fraction_scales_with_size(self):
        h = distortion_homography(DistortionSpec(2, 0.0, (0.10, -0.05)), 1000, 400)
        assert apply_h(h, (0.0, 0.0)) == pytest.approx((100.0, -20.0))

    def test_rotation_keeps_center_before_shift(self):
        spec = DistortionSpec(3, 25.0, (0.0, 0.0))
        h = distortion_homography(spec, 101, 51)
        assert apply_h(h, (50.0, 25.0)) == pytest.approx((50.0, 25.0))

    def test_rotation_then_shift(self):
        spec = DistortionSpec(3, 30.0, (0.2, 0.1))
        h = distortion_homography(spec, 200, 100)
        rotation = Homography.rotation_about(30.0, 99.5, 49.5)
        expected = Homography.translation(40.0, 10.0).compose(rotation)
        np.testing.assert_allclose(h.m, expected.m, atol=1e-12)

    @pytest.mark.parametrize("level", [1, 2, 3])
    def test_draws_stay_within_level(self, level):
        max_rot, max_shift = LEVEL_BOUNDS[level]
        for seed in range(300):
            spec = draw_distortion(level, seed)
            assert abs(spec.rotation_deg) <= max_rot
            assert all(abs(f) <= max_shift for f in spec.shift_frac)
            spec.validate()

    def test_draw_is_deterministic(self):
        assert draw_distortion(2, 42) == draw_distortion(2, 42)
        assert draw_distortion(2, 42) != draw_distortion(2, 43)

    def test_unknown_level(self):
        with pytest.raises(ContractError):
            draw_distortion(4, 0)

    def test_out_of_bounds_spec(self):
        with pytest.raises(ContractError):
            DistortionSpec(1, 15.0, (0.0, 0.0)).validate()
        with pytest.raises(ContractError):
            DistortionSpec(1, 5.0, (0.0, 0.08)).validate()


class TestScenario:

    def test_zero_distortion_keeps_t2(self):
        t1, t2, gt = synthesize_scene(96, seed=1)
        scenario = generate_scenario(t1, t2, gt, DistortionSpec(1, 0.0, (0.0, 0.0)), name="flat")
        assert scenario.t2_distorted == t2
        assert scenario.name == "flat"

    def test_ground_truth_maps_into_t1(self):
        t1, t2, gt = synthesize_scene(96, seed=2)
        spec = DistortionSpec(2, 12.0, (0.05, -0.03))
        scenario = generate_scenario(t1, t2, gt, spec)
        np.testing.assert_allclose(scenario.gt_homography.m, distortion_homography(spec, 96, 96).m)
        assert scenario.t2_distorted.shape == t1.shape

    def test_dimension_mismatch(self):
        t1, t2, gt = synthesize_scene(96, seed=3)
        with pytest.raises(ContractError):
            generate_scenario(t1, Raster.zeros(64, 64), gt, DistortionSpec(1, 0.0, (0.0, 0.0)))

    def test_invalid_spec(self):
        t1, t2, gt = synthesize_scene(96, seed=3)
        with pytest.raises(ContractError):
            generate_scenario(t1, t2, gt, DistortionSpec(1, 45.0, (0.0, 0.0)))


class TestRegistrationError:

    def test_same_homography(self):
        h = distortion_homography(DistortionSpec(3, 17.0, (0.1, 0.1)), 300, 200)
        assert registration_error(h, h, 300, 200) == pytest.approx((0.0, 0.0), abs=1e-9)

    def test_extra_unit_translation(self):
        gt = distortion_homography(DistortionSpec(2, -8.0, (0.05, 0.0)), 300, 200)
        est = Homography.translation(1.0, 0.0).compose(gt)
        mean, worst = registration_error(est, gt, 300, 200)
        assert mean == pytest.approx(1.0)
        assert worst == pytest.approx(1.0)

    def test_residual_rotation_chord(self):
        gt = Homography.rotation_about(-8.0, 499.5, 499.5)
        est = Homography.rotation_about(0.1, 499.5, 499.5).compose(gt)
        _, worst = registration_error(est, gt, 1000, 1000)
        chord = 2.0 * 499.5 * math.sqrt(2.0) * math.sin(math.radians(0.05))
        assert worst == pytest.approx(chord, rel=1e-9)
        assert worst == pytest.approx(1.23, abs=0.01)


class TestSyntheticScene:

    def test_shapes_and_values(self):
        t1, t2, gt = synthesize_scene(128, seed=0)
        assert t1.shape == t2.shape == gt.shape == (128, 128)
        assert set(np.unique(gt.data)) <= {0, 255}
        assert 0 < np.count_nonzero(gt.data) < 128 * 128 // 2

    def test_deterministic(self):
        first = synthesize_scene(96, seed=9)
        second = synthesize_scene(96, seed=9)
        assert all(a == b for a, b in zip(first, second))

    def test_change_is_brighter_in_t2(self):
        t1, t2, gt = synthesize_scene(128, seed=6)
        changed = gt.data == 255
        assert t2.data[changed].mean() > t1.data[changed].mean() + 30

    def test_too_small(self):
        with pytest.raises(ContractError):
            synthesize_scene(32)

    def test_corpus_layout(self):
        corpus = build_corpus(n_scenes=2, levels=(1, 3), size=64, seed=0)
        assert [s.name for s in corpus] == ["scene0_lv1", "scene0_lv3", "scene1_lv1", "scene1_lv3"]
        assert [s.spec.level for s in corpus] == [1, 3, 1, 3]


@pytest.mark.slow
class TestCorpusBenchmark:
    """4 个场景 × 3 个畸变等级，尺寸 512，完整配准 + 检测"""

    @pytest.fixture(scope="class")
    def rows(self):
        config = PipelineConfig()
        results = []
        for scenario in build_corpus(n_scenes=4, levels=(1, 2, 3), size=512, seed=0):
            outcome = register_images(scenario.t1, scenario.t2_distorted, config)
            mean_px, _ = registration_error(outcome.homography, scenario.gt_homography, 512, 512)
            change = detect_images(scenario.t1, outcome.registered, outcome.validity, config, outcome.overlap)
            mask = polygon_mask(outcome.overlap, 512, 512)
            f1 = metrics(confusion(change.binary, scenario.gt_change, mask)).f1
            results.append((scenario.spec.level, mean_px, f1))
        return results

    def test_registration_error_per_level(self, rows):
        errors = {lv: np.mean([e for level, e, _ in rows if level == lv]) for lv in (1, 2, 3)}
        assert errors[1] < 2.0
        assert errors[3] < 5.0

    def test_change_f1_inside_overlap(self, rows):
        assert len(rows) == 12
        assert np.mean([f1 for _, _, f1 in rows]) >= 0.85
