"""
单应估计与公共区域测试
"""
import math
import types

import numpy as np
import pytest

from src.config.pipeline_config import RansacConfig
from src.core_application.errors import (
    ContractError, DegeneracyError, EstimationError, GeometryError, InsufficientDataError,
)
from src.core_application.geomest import (
    Homography, OverlapPolygon, apply_h, apply_h_array, clip_convex, dlt_homography, overlap_polygon,
    polygon_area, polygon_mask, ransac_homography,
)
from src.core_application.evalbench import registration_error
from src.core_application.matchkit import KeypointSet

UNIT_SQUARE = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]


def _kps(t1, t2) -> KeypointSet:
    t1 = np.asarray(t1, dtype=np.float64)
    return KeypointSet(t1, np.asarray(t2, dtype=np.float64), np.ones(len(t1)), np.ones(len(t1), dtype=int))


def _relative_error(a: Homography, b: Homography) -> float:
    return float(np.linalg.norm(a.m - b.m) / np.linalg.norm(b.m))


def _random_homography(rng: np.random.Generator, size: float, projective: float = 1e-4) -> Homography:
    """旋转 ≤ 30°、平移 ≤ 20% 边长、投影项 ≤ projective"""
    c = (size - 1) / 2.0
    base = Homography.translation(*rng.uniform(-0.2, 0.2, size=2) * size).compose(
        Homography.rotation_about(rng.uniform(-30.0, 30.0), c, c)
    )
    m = base.m.copy()
    m[2, :2] = rng.uniform(-projective, projective, size=2)
    return Homography(m)


class TestHomography:

    def test_normalizes_bottom_right(self):
        h = Homography(np.eye(3) * 4.0)
        np.testing.assert_allclose(h.m, np.eye(3))

    def test_rejects_singular(self):
        with pytest.raises(GeometryError):
            Homography([[1, 2, 0], [2, 4, 0], [0, 0, 1]])

    def test_rejects_wrong_shape(self):
        with pytest.raises(GeometryError):
            Homography(np.eye(2))

    def test_compose_applies_right_operand_first(self):
        h = Homography.translation(1, 0).compose(Homography.translation(2, 3))
        np.testing.assert_allclose(h.m, Homography.translation(3, 3).m)
        scale = Homography(np.diag([2.0, 2.0, 1.0]))
        assert apply_h(scale.compose(Homography.translation(1, 0)), (0, 0)) == pytest.approx((2.0, 0.0))

    def test_rotation_about_keeps_center(self):
        h = Homography.rotation_about(37.0, 12.5, 7.5)
        assert apply_h(h, (12.5, 7.5)) == pytest.approx((12.5, 7.5))


class TestApply:

    def test_identity(self):
        assert apply_h(Homography.identity(), (3.5, 7)) == (3.5, 7.0)

    def test_translation(self):
        assert apply_h(Homography.translation(5, -3), (0, 0)) == (5.0, -3.0)

    def test_scale(self):
        assert apply_h(Homography(np.diag([2.0, 2.0, 1.0])), (1, 1)) == (2.0, 2.0)

    def test_line_at_infinity(self):
        h = Homography([[1, 0, 0], [0, 1, 0], [1, 0, 1]])
        with pytest.raises(GeometryError):
            apply_h(h, (-1.0, 0.0))
        assert np.all(np.isinf(apply_h_array(h, [(-1.0, 0.0)])))

    def test_inverse_round_trip(self):
        h = Homography([[1.05, 0.1, 12.0], [-0.08, 0.97, -4.0], [1e-4, -2e-4, 1.0]])
        rng = np.random.default_rng(0)
        for p in rng.uniform(0, 500, size=(50, 2)):
            q = apply_h(h, apply_h(h.inverse(), tuple(p)))
            assert q == pytest.approx(tuple(p), abs=1e-9)

    def test_array_matches_scalar(self):
        h = Homography([[0.9, -0.2, 3.0], [0.15, 1.1, -7.0], [2e-4, 1e-4, 1.0]])
        pts = np.array([(0.0, 0.0), (10.0, 20.0), (250.0, 125.0)])
        expected = [apply_h(h, tuple(p)) for p in pts]
        np.testing.assert_allclose(apply_h_array(h, pts), expected)


class TestDLT:

    def test_identity_fit(self):
        h = dlt_homography(UNIT_SQUARE, UNIT_SQUARE)
        np.testing.assert_allclose(h.m, np.eye(3), atol=1e-10)

    def test_translation_fit(self):
        dst = [(x + 5, y - 3) for x, y in UNIT_SQUARE]
        h = dlt_homography(UNIT_SQUARE, dst)
        np.testing.assert_allclose(h.m, [[1, 0, 5], [0, 1, -3], [0, 0, 1]], atol=1e-10)

    def test_recovers_projective_generator(self):
        t = math.radians(10.0)
        gen = Homography([
            [1.1 * math.cos(t), -1.1 * math.sin(t), 40.0],
            [1.1 * math.sin(t), 1.1 * math.cos(t), -25.0],
            [1e-4, -1e-4, 1.0],
        ])
        src = np.random.default_rng(42).uniform(0, 500, size=(20, 2))
        dst = apply_h_array(gen, src)
        assert _relative_error(dlt_homography(src, dst), gen) < 1e-6

    def test_too_few_points(self):
        with pytest.raises(InsufficientDataError):
            dlt_homography(UNIT_SQUARE[:3], UNIT_SQUARE[:3])

    def test_count_mismatch(self):
        with pytest.raises(ContractError):
            dlt_homography(UNIT_SQUARE, UNIT_SQUARE[:3] + [(2.0, 2.0), (3.0, 1.0)])

    def test_collinear_minimal_sample(self):
        src = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (0.0, 1.0)]
        dst = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
        with pytest.raises(DegeneracyError):
            dlt_homography(src, dst)

    def test_all_points_on_a_line(self):
        src = [(float(i), 2.0 * i) for i in range(8)]
        with pytest.raises(DegeneracyError):
            dlt_homography(src, src)

    def test_recovers_random_homographies(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            gen = _random_homography(rng, 1024.0)
            src = rng.uniform(0, 1024, size=(20, 2))
            assert _relative_error(dlt_homography(src, apply_h_array(gen, src)), gen) < 1e-6, seed

    def test_invariant_to_coordinate_scaling(self):
        rng = np.random.default_rng(12)
        gen = _random_homography(rng, 500.0)
        src = rng.uniform(0, 500, size=(30, 2))
        dst = apply_h_array(gen, src) + rng.normal(0, 0.5, size=(30, 2))
        h = dlt_homography(src, dst)
        h10 = dlt_homography(src * 10.0, dst * 10.0)
        query = rng.uniform(0, 500, size=(50, 2))
        np.testing.assert_allclose(
            apply_h_array(h10, query * 10.0) / 10.0, apply_h_array(h, query), rtol=0, atol=1e-8
        )


class TestRansac:

    def test_translation_with_outliers(self):
        rng = np.random.default_rng(7)
        t2 = rng.uniform(0, 200, size=(40, 2))
        t1 = t2 + (12.0, 7.0)
        outliers_t2 = rng.uniform(0, 200, size=(10, 2))
        outliers_t1 = rng.uniform(0, 200, size=(10, 2))
        kps = _kps(np.vstack([t1, outliers_t1]), np.vstack([t2, outliers_t2]))

        result = ransac_homography(kps, RansacConfig(inlier_threshold=3.0, seed=1))
        assert result.inlier_count >= 40
        assert result.inlier_mask[:40].all()
        assert apply_h(result.homography, (100.0, 100.0)) == pytest.approx((112.0, 107.0), abs=0.5)

    def test_perfect_identity(self):
        pts = np.random.default_rng(3).uniform(0, 300, size=(30, 2))
        result = ransac_homography(_kps(pts, pts), RansacConfig(seed=0))
        np.testing.assert_allclose(result.homography.m, np.eye(3), atol=1e-6)
        assert result.inlier_count == 30

    def test_deterministic_for_seed(self):
        rng = np.random.default_rng(11)
        t2 = rng.uniform(0, 200, size=(60, 2))
        t1 = t2 + rng.normal(0, 0.8, size=t2.shape) + (3.0, -2.0)
        t1[::4] = rng.uniform(0, 200, size=t1[::4].shape)
        cfg = RansacConfig(seed=99)
        a = ransac_homography(_kps(t1, t2), cfg)
        b = ransac_homography(_kps(t1, t2), cfg)
        np.testing.assert_array_equal(a.homography.m, b.homography.m)
        np.testing.assert_array_equal(a.inlier_mask, b.inlier_mask)
        assert a.iterations == b.iterations

    def test_adaptive_iterations_stop_early(self):
        pts = np.random.default_rng(4).uniform(0, 300, size=(25, 2))
        result = ransac_homography(_kps(pts + 1.0, pts), RansacConfig(max_iterations=5000, seed=2))
        assert result.iterations < 5000

    def test_too_few_pairs(self):
        with pytest.raises(EstimationError):
            ransac_homography(_kps(UNIT_SQUARE[:3], UNIT_SQUARE[:3]))

    def test_degenerate_four_pairs(self):
        src = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (0.0, 1.0)]
        with pytest.raises((DegeneracyError, EstimationError)):
            ransac_homography(_kps(src, src), RansacConfig(max_iterations=50, seed=0))

    @staticmethod
    def _contaminated(seed: int, n: int = 200, outlier_frac: float = 0.3, noise: float = 1.0):
        rng = np.random.default_rng(seed)
        gen = _random_homography(rng, 1024.0)
        t2 = rng.uniform(0, 1024, size=(n, 2))
        t1 = apply_h_array(gen, t2) + rng.normal(0, noise, size=(n, 2))
        bad = rng.permutation(n)[: int(round(outlier_frac * n))]
        t1[bad] = rng.uniform(0, 1024, size=(len(bad), 2))
        return gen, _kps(t1, t2)

    def test_refit_never_loses_inliers(self):
        for seed in range(20):
            _, kps = self._contaminated(seed)
            result = ransac_homography(kps, RansacConfig(seed=seed))
            assert result.inlier_count >= result.sample_inliers

    def test_recovers_contaminated_homographies(self):
        passed = 0
        for seed in range(100):
            gen, kps = self._contaminated(seed)
            result = ransac_homography(kps, RansacConfig(inlier_threshold=3.0, seed=seed))
            mean, _ = registration_error(result.homography, gen, 1024, 1024)
            passed += mean < 1.5
        assert passed >= 95


class TestOverlap:

    @staticmethod
    def _corners(poly: OverlapPolygon):
        return sorted((round(x, 9), round(y, 9)) for x, y in poly.vertices)

    def test_identity_full_frame(self):
        poly = overlap_polygon(10, 10, 10, 10, Homography.identity())
        assert poly.area == pytest.approx(100.0)
        assert self._corners(poly) == [(0, 0), (0, 10), (10, 0), (10, 10)]

    def test_translated_square(self):
        poly = overlap_polygon(10, 10, 10, 10, Homography.translation(5, 5))
        assert poly.area == pytest.approx(25.0)
        assert self._corners(poly) == [(5, 5), (5, 10), (10, 5), (10, 10)]

    def test_vertices_counter_clockwise(self):
        poly = overlap_polygon(100, 80, 60, 60, Homography.rotation_about(20.0, 30.0, 30.0))
        assert polygon_area(poly.vertices) > 0

    def test_rotation_matches_monte_carlo(self):
        h = Homography.rotation_about(30.0, 49.5, 49.5)
        poly = overlap_polygon(100, 100, 100, 100, h)
        samples = np.random.default_rng(0).uniform(0, 100, size=(1_000_000, 2))
        back = apply_h_array(h.inverse(), samples)
        inside = np.all((back >= 0) & (back <= 100), axis=1)
        estimate = inside.mean() * 100 * 100
        assert poly.area == pytest.approx(estimate, rel=0.01)

    def test_disjoint_footprints(self):
        poly = overlap_polygon(10, 10, 10, 10, Homography.translation(25, 0))
        assert poly.is_empty
        assert poly.area == 0.0

    def test_singular_homography(self):
        with pytest.raises(GeometryError):
            overlap_polygon(10, 10, 10, 10, types.SimpleNamespace(m=np.zeros((3, 3))))

    def test_area_bounded_by_both_footprints(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            h = _random_homography(rng, 300.0, projective=1e-4)
            w2, h2 = (int(v) for v in rng.integers(100, 400, size=2))
            poly = overlap_polygon(300, 200, w2, h2, h)
            footprint = abs(polygon_area([apply_h(h, p) for p in [(0, 0), (w2, 0), (w2, h2), (0, h2)]]))
            assert poly.area <= min(300 * 200, footprint) + 1e-6

    def test_random_homographies_match_monte_carlo(self):
        rng = np.random.default_rng(31)
        for _ in range(20):
            h = _random_homography(rng, 512.0, projective=2e-5)
            poly = overlap_polygon(512, 512, 512, 512, h)
            samples = rng.uniform(0, 512, size=(400_000, 2))
            back = apply_h_array(h.inverse(), samples)
            inside = np.all((back >= 0) & (back <= 512), axis=1)
            assert poly.area == pytest.approx(inside.mean() * 512 * 512, rel=0.01)

    def test_mask_count_matches_area(self):
        rng = np.random.default_rng(41)
        for _ in range(20):
            h = _random_homography(rng, 1024.0, projective=2e-5)
            poly = overlap_polygon(1024, 1024, 1024, 1024, h)
            if poly.area < 1e4:
                continue
            count = np.count_nonzero(polygon_mask(poly, 1024, 1024).data)
            assert count == pytest.approx(poly.area, rel=0.005)


class TestPolygons:

    def test_signed_area(self):
        assert polygon_area(UNIT_SQUARE) == pytest.approx(1.0)
        assert polygon_area(UNIT_SQUARE[::-1]) == pytest.approx(-1.0)
        assert polygon_area(UNIT_SQUARE[:2]) == 0.0

    def test_clip_convex(self):
        subject = [(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)]
        clip = [(2.0, 2.0), (6.0, 2.0), (6.0, 6.0), (2.0, 6.0)]
        assert abs(polygon_area(clip_convex(subject, clip))) == pytest.approx(4.0)

    def test_clip_inside_is_unchanged(self):
        subject = [(1.0, 1.0), (2.0, 1.0), (2.0, 2.0)]
        clip = [(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)]
        assert clip_convex(subject, clip) == subject

    def test_full_mask(self):
        poly = OverlapPolygon(((0.0, 0.0), (8.0, 0.0), (8.0, 6.0), (0.0, 6.0)))
        assert np.all(polygon_mask(poly, 8, 6).data == 255)

    def test_empty_mask(self):
        assert np.all(polygon_mask(OverlapPolygon(), 8, 6).data == 0)

    def test_left_half_with_inclusive_boundary(self):
        poly = OverlapPolygon(((0.0, 0.0), (5.0, 0.0), (5.0, 10.0), (0.0, 10.0)))
        mask = polygon_mask(poly, 10, 10).data
        assert np.all(mask[:, :6] == 255)
        assert np.all(mask[:, 6:] == 0)

    def test_orientation_does_not_matter(self):
        verts = ((1.0, 1.0), (7.5, 2.0), (6.0, 7.0), (2.0, 6.5))
        ccw = polygon_mask(OverlapPolygon(verts), 9, 9)
        cw = polygon_mask(OverlapPolygon(verts[::-1]), 9, 9)
        assert ccw == cw
