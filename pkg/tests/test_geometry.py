#!/usr/bin/env python3
"""
Tests for point clouds, normalization, Chamfer distance, analytic shapes and SDF samples
"""

import numpy as np
import pytest

from implicit_deform.diffcore import grad, leaf
from implicit_deform.geometry import (PointCloud, PrimitiveShape, RoundedBox, SdfSampleSet, TubeShape, chamfer,
                                      chamfer_var, chamfer_x1e3, dense_surface, farthest_pair, fit_normalization,
                                      nearest_neighbors, normalize_cloud, primitive_sdf, sample_training_points)
from implicit_deform.utils.error_handler import ConfigurationError, DataError, DegeneracyError


@pytest.mark.unit
class TestPointCloud:
    """Point cloud validation"""

    def test_empty_cloud_rejected(self):
        with pytest.raises(DegeneracyError):
            PointCloud(np.zeros((0, 3)))

    def test_non_unit_normals_rejected(self):
        with pytest.raises(DataError):
            PointCloud(np.zeros((2, 3)), np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]]))

    def test_sample_without_replacement(self):
        cloud = PointCloud(np.arange(30.0).reshape(10, 3))
        picked = cloud.sample(4, np.random.default_rng(0))
        assert len(picked) == 4
        assert len({tuple(p) for p in picked.points}) == 4
        assert cloud.sample(50, np.random.default_rng(0)) is cloud


@pytest.mark.unit
class TestNormalization:
    """Bounding-box normalization into the query cube"""

    def test_largest_extent_maps_to_scale_box(self):
        raw = np.array([[0.0, 0.0, 0.0], [4.0, 1.0, 2.0]])
        transform = fit_normalization(raw)
        normalized = transform.apply(raw)
        assert np.ptp(normalized, axis=0).max() == pytest.approx(2.0)
        np.testing.assert_allclose(normalized.min(axis=0) + normalized.max(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(transform.invert(normalized), raw)

    def test_normalize_cloud_keeps_normals(self):
        cloud = PointCloud(np.array([[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]), np.array([[1.0, 0, 0], [0, 1.0, 0]]))
        normalized, _ = normalize_cloud(cloud)
        np.testing.assert_array_equal(normalized.normals, cloud.normals)

    def test_zero_extent_rejected(self):
        with pytest.raises(DegeneracyError):
            fit_normalization(np.ones((5, 3)))

    def test_transform_round_trips_through_dict(self):
        transform = fit_normalization(np.array([[0.0, 0, 0], [1.0, 2.0, 3.0]]))
        restored = type(transform).from_dict(transform.to_dict())
        np.testing.assert_allclose(restored.center, transform.center)
        assert restored.scale == transform.scale


@pytest.mark.unit
class TestChamfer:
    """Chamfer distance and nearest neighbours"""

    def test_identical_clouds_have_zero_distance(self, sphere_points):
        points = sphere_points(200)
        assert chamfer(points, points) == 0.0

    def test_known_offset(self):
        """Two single points at distance 0.1 give 2 * 0.01"""
        a = np.array([[0.0, 0.0, 0.0]])
        b = np.array([[0.1, 0.0, 0.0]])
        assert chamfer(a, b) == pytest.approx(0.02)
        assert chamfer_x1e3(a, b) == pytest.approx(20.0)

    def test_symmetry(self, sphere_points):
        a, b = sphere_points(100, seed=1), sphere_points(150, radius=0.6, seed=2)
        assert chamfer(a, b) == pytest.approx(chamfer(b, a))

    def test_chunked_neighbours_match_brute_force(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(50, 3)), rng.normal(size=(40, 3))
        index, dist = nearest_neighbors(a, b, chunk=7)
        brute = np.sum((a[:, None] - b[None]) ** 2, axis=2)
        np.testing.assert_array_equal(index, brute.argmin(axis=1))
        np.testing.assert_allclose(dist, brute.min(axis=1))

    def test_differentiable_chamfer_value_and_gradient(self):
        """Value equals the array version; gradient pulls the point towards its match"""
        pred = leaf(np.array([[0.1, 0.0, 0.0]]))
        target = np.array([[0.0, 0.0, 0.0]])
        value = chamfer_var(pred, target)
        assert float(value.value) == pytest.approx(chamfer(pred.value, target))
        (g,) = grad(value, [pred])
        np.testing.assert_allclose(g.value, [[0.4, 0.0, 0.0]])

    def test_farthest_pair(self):
        points = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.2, 0.1, 0], [-2.0, 0, 0]])
        first, second = farthest_pair(points)
        assert {tuple(first), tuple(second)} == {(1.0, 0.0, 0.0), (-2.0, 0.0, 0.0)}


@pytest.mark.unit
class TestAnalyticShapes:
    """Rounded boxes, unions and tubes"""

    def test_box_distance_and_gradient(self):
        box = RoundedBox(np.zeros(3), np.array([0.5, 0.3, 0.2]))
        sd, grad_ = primitive_sdf(box, np.array([1.0, 0.0, 0.0]))
        assert sd == pytest.approx(0.5)
        np.testing.assert_allclose(grad_, [1.0, 0.0, 0.0])
        inside, _ = primitive_sdf(box, np.zeros(3))
        assert inside == pytest.approx(-0.2)

    def test_invalid_radius_rejected(self):
        with pytest.raises(ConfigurationError):
            RoundedBox(np.zeros(3), np.array([0.5, 0.3, 0.2]), radius=0.3)

    def test_union_surface_samples_lie_on_surface(self):
        shape = PrimitiveShape((RoundedBox(np.zeros(3), np.array([0.3, 0.1, 0.05]), 0.02),
                                RoundedBox(np.array([0.4, 0.0, 0.0]), np.array([0.2, 0.2, 0.03]), 0.01)))
        cloud = dense_surface(shape, 300, seed=1)
        sd, grads = shape.sdf_and_grad(cloud.points)
        assert np.abs(sd).max() < 1e-9
        np.testing.assert_allclose(np.linalg.norm(cloud.normals, axis=1), 1.0)

    def test_tube_distance(self):
        tube = TubeShape(np.array([[0.0, 0, 0], [1.0, 0, 0]]), 0.1)
        np.testing.assert_allclose(tube.sdf(np.array([[0.5, 0.3, 0.0], [1.2, 0.0, 0.0]])), [0.2, 0.1])

    def test_tube_needs_two_vertices(self):
        with pytest.raises(ConfigurationError):
            TubeShape(np.zeros((1, 3)), 0.1)


@pytest.mark.unit
class TestSdfSamples:
    """Training sample sets"""

    @pytest.fixture
    def box(self):
        return RoundedBox(np.zeros(3), np.array([0.5, 0.3, 0.2]), 0.05)

    def test_layout_of_training_points(self, box):
        samples = sample_training_points(box, 40, 60, seed=0)
        assert len(samples) == 100
        assert samples.surface_mask[:40].all() and not samples.surface_mask[40:].any()
        np.testing.assert_array_equal(samples.target_sd[:40], 0.0)
        assert samples.target_normals.shape == (40, 3)
        assert np.abs(samples.queries).max() <= 1.0

    def test_same_seed_same_samples(self, box):
        a, b = sample_training_points(box, 10, 20, seed=5), sample_training_points(box, 10, 20, seed=5)
        np.testing.assert_array_equal(a.queries, b.queries)

    def test_subsample_keeps_proportions(self, box):
        samples = sample_training_points(box, 40, 60, seed=0)
        batch = samples.subsample(10, 20, np.random.default_rng(0))
        assert int(batch.surface_mask.sum()) == 10
        assert len(batch) == 30

    @pytest.mark.parametrize('shape', [
        RoundedBox(np.zeros(3), np.array([0.5, 0.3, 0.2]), 0.05),
        RoundedBox(np.array([0.1, -0.2, 0.0]), np.array([0.4, 0.1, 0.1])),
        TubeShape(np.array([[-0.6, 0.0, 0.0], [0.0, 0.3, 0.0], [0.6, 0.0, 0.1]]), 0.08),
    ], ids=['rounded-box', 'sharp-box', 'tube'])
    def test_off_surface_samples_are_eikonal(self, shape):
        """|grad sdf| = 1 at every off-surface sample, analytically and by central differences"""
        samples = sample_training_points(shape, 20, 200, seed=4)
        off = samples.queries[~samples.surface_mask]
        sd, analytic = primitive_sdf(shape, off)
        np.testing.assert_allclose(sd, samples.target_sd[~samples.surface_mask])
        np.testing.assert_allclose(np.linalg.norm(analytic, axis=1), 1.0, atol=1e-6)

        eps = 1e-7
        numeric = np.stack([(shape.sdf_and_grad(off + eps * e)[0] - shape.sdf_and_grad(off - eps * e)[0]) / (2 * eps)
                            for e in np.eye(3)], axis=1)
        np.testing.assert_allclose(np.linalg.norm(numeric, axis=1), 1.0, atol=1e-5)

    def test_queries_outside_domain_rejected(self):
        with pytest.raises(DataError):
            SdfSampleSet(np.array([[1.5, 0.0, 0.0]]), np.array([0.3]), np.array([False]), np.zeros((0, 3)))

    def test_surface_rows_need_zero_distance(self):
        with pytest.raises(DataError):
            SdfSampleSet(np.zeros((1, 3)), np.array([0.1]), np.array([True]), np.array([[0.0, 0.0, 1.0]]))

    def test_unnormalized_shape_rejected(self):
        big = RoundedBox(np.zeros(3), np.array([2.0, 0.3, 0.2]))
        with pytest.raises(DegeneracyError):
            sample_training_points(big, 50, 10, seed=0)
