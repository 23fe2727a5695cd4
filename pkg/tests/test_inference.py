#!/usr/bin/env python3
"""
Tests for particle-filter inference and surface reconstruction
"""

from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from implicit_deform.contact import ContactConfig
from implicit_deform.geometry import chamfer_x1e3
from implicit_deform.inference import (METRIC_COLUMNS, FilterConfig, ParticleSet, extract_surface, field_functions,
                                       init_particles, propagate, refine_particles, resample, run_filter,
                                       weight_particles, write_trace)
from implicit_deform.model import action_predict_batch, force_encode_batch
from implicit_deform.synthgen import decode_blob
from implicit_deform.utils.artifacts import read_csv
from implicit_deform.utils.error_handler import ConfigurationError, NumericError, ReconstructionError


@pytest.mark.unit
class TestFilterConfig:
    """Filter settings"""

    def test_beta_range(self):
        with pytest.raises(ConfigurationError):
            FilterConfig(beta=1.5)

    def test_needs_a_particle(self):
        with pytest.raises(ConfigurationError):
            FilterConfig(particles=0)

    def test_noise_from_variance(self):
        assert FilterConfig(sigma=0.04, sigma_is_variance=True).noise_std == pytest.approx(0.2)
        assert FilterConfig(sigma=0.04).noise_std == pytest.approx(0.04)


@pytest.mark.unit
class TestParticleSteps:
    """Weighting, resampling, refinement and propagation"""

    def test_weight_formula(self):
        measured = np.array([0.0, 0.0, 2.0, 0.0, 0.0, 0.0])
        predicted = np.stack([measured, measured + np.array([0.6, 0.0, 0.8, 0.0, 0.0, 0.0])])
        np.testing.assert_allclose(weight_particles(predicted, measured, 0.7), [1.0, np.exp(-0.7)])

    def test_negative_weights_rejected(self):
        with pytest.raises(NumericError):
            ParticleSet(np.zeros((2, 3)), weights=np.array([0.5, -0.1]))

    def test_full_exploration(self):
        particles = ParticleSet(np.full((4, 3), 100.0))
        out = resample(particles, np.ones(4), 1.0, np.random.default_rng(0), std=0.01)
        assert len(out) == 4
        assert np.abs(out.contacts).max() < 1.0

    def test_no_exploration_copies_by_weight(self):
        contacts = np.arange(12.0).reshape(4, 3)
        out = resample(ParticleSet(contacts), np.array([0.0, 0.0, 1.0, 0.0]), 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out.contacts, np.tile(contacts[2], (4, 1)))

    def test_fresh_draws_come_first(self):
        """k = floor(beta n + 0.5) fresh rows precede the copies"""
        contacts = np.full((5, 2), 50.0)
        out = resample(ParticleSet(contacts), np.ones(5), 0.5, np.random.default_rng(1), std=0.01)
        assert np.abs(out.contacts[:3]).max() < 1.0
        np.testing.assert_array_equal(out.contacts[3:], 50.0)

    @pytest.mark.parametrize('weights', [
        [0.1, 0.2, 0.3, 0.4],
        [5.0, 1.0, 1.0, 0.0, 3.0],
    ])
    def test_copy_frequencies_follow_weights(self, weights):
        """Copy counts over 10^4 draws stay within 3 sigma of the binomial expectation"""
        weights = np.asarray(weights)
        n = len(weights)
        contacts = np.arange(n, dtype=np.float64).reshape(n, 1)
        rng = np.random.default_rng(11)
        rounds = 10_000 // n
        picked = np.concatenate([resample(ParticleSet(contacts), weights, 0.0, rng).contacts[:, 0]
                                 for _ in range(rounds)])
        draws = picked.size
        counts = np.bincount(picked.astype(int), minlength=n)
        p = weights / weights.sum()
        sigma = np.sqrt(draws * p * (1.0 - p))
        assert draws == rounds * n
        assert np.all(np.abs(counts - draws * p) <= 3.0 * sigma)

    @pytest.mark.edge_case
    def test_zero_weights_fall_back_to_exploration(self, caplog):
        contacts = np.full((3, 2), 50.0)
        out = resample(ParticleSet(contacts), np.zeros(3), 0.0, np.random.default_rng(2), std=0.01)
        assert np.abs(out.contacts).max() < 1.0
        assert 'full exploration' in caplog.text

    def test_init_particles_shape(self):
        particles = init_particles(6, 3, 0.01, np.random.default_rng(0))
        assert particles.contacts.shape == (6, 3)

    def test_zero_refine_epochs_returns_copy(self, tiny_model, tiny_dataset, filter_config):
        trajectory = tiny_dataset.trajectories_in('test')[0]
        frame = trajectory.transitions[0]
        particles = init_particles(4, tiny_model.config.contact_dim, 0.01, np.random.default_rng(0))
        out = refine_particles(particles, frame.observed, frame.wrench, frame.pose, tiny_model,
                               tiny_model.code(trajectory.object_id),
                               tiny_dataset.objects[trajectory.object_id].nominal_cloud,
                               replace(filter_config, refine_epochs=0))
        np.testing.assert_array_equal(out.contacts, particles.contacts)
        assert out.contacts is not particles.contacts
        assert out.refine_losses.shape == (4, 0)

    def test_refinement_independent_of_worker_count(self, tiny_model, tiny_dataset, filter_config):
        trajectory = tiny_dataset.trajectories_in('test')[0]
        frame = trajectory.transitions[0]
        particles = init_particles(4, tiny_model.config.contact_dim, 0.01, np.random.default_rng(0))
        args = (frame.observed, frame.wrench, frame.pose, tiny_model, tiny_model.code(trajectory.object_id),
                tiny_dataset.objects[trajectory.object_id].nominal_cloud)
        serial = refine_particles(particles, *args, replace(filter_config, refine_epochs=2))
        threaded = refine_particles(particles, *args, replace(filter_config, refine_epochs=2, workers=3))
        np.testing.assert_array_equal(serial.contacts, threaded.contacts)
        assert serial.refine_losses.shape == (4, 2)
        assert np.all(np.isfinite(serial.refine_losses))
        assert not np.array_equal(serial.contacts, particles.contacts)

    def test_propagate_without_noise(self, tiny_model, tiny_dataset):
        trajectory = tiny_dataset.trajectories_in('train')[0]
        frame = trajectory.transitions[0]
        alpha = tiny_model.code(trajectory.object_id)
        particles = init_particles(3, tiny_model.config.contact_dim, 0.01, np.random.default_rng(0))
        out = propagate(particles, frame.wrench, frame.pose, frame.action, alpha, tiny_model, 0.0,
                        np.random.default_rng(0))
        z = force_encode_batch(tiny_model, frame.wrench, particles.contacts, frame.pose)
        wrench, contacts = action_predict_batch(tiny_model, alpha, z, frame.action)
        np.testing.assert_array_equal(out.contacts, contacts)
        np.testing.assert_array_equal(out.wrench_pred, wrench)


@pytest.mark.unit
class TestSurfaceExtraction:
    """Zero level set sampling"""

    def test_sphere_reconstruction_accuracy(self, sphere_sdf, sphere_points):
        sdf, sdf_and_grad = sphere_sdf
        truth = sphere_points(8000, seed=5)
        fine = extract_surface(sdf, sdf_and_grad, 64)
        np.testing.assert_allclose(np.linalg.norm(fine.points, axis=1), 0.5, atol=1e-9)
        fine_cd = chamfer_x1e3(fine.points, truth)
        assert fine_cd < 1.0
        coarse_cd = chamfer_x1e3(extract_surface(sdf, sdf_and_grad, 32).points, truth)
        assert coarse_cd > fine_cd

    def test_empty_level_set(self):
        def sdf(points):
            return np.ones(len(points))

        def sdf_and_grad(points):
            return np.ones(len(points)), np.zeros((len(points), 3))

        with pytest.raises(ReconstructionError):
            extract_surface(sdf, sdf_and_grad, 8)
        assert len(extract_surface(sdf, sdf_and_grad, 8, fallback_points=5)) == 5

    def test_resolution_validated(self, sphere_sdf):
        with pytest.raises(ConfigurationError):
            extract_surface(*sphere_sdf, 1)

    def test_model_closures_agree(self, tiny_model):
        alpha = tiny_model.code(sorted(tiny_model.codes)[0])
        sdf, sdf_and_grad = field_functions(tiny_model, alpha, np.zeros(tiny_model.config.force_dim))
        points = np.random.default_rng(0).uniform(-1, 1, size=(16, 3))
        values, gradients = sdf_and_grad(points)
        np.testing.assert_allclose(sdf(points), values, rtol=1e-12, atol=1e-14)
        assert gradients.shape == (16, 3)


@pytest.mark.integration
class TestRunFilter:
    """Full filter loop on a generated trajectory"""

    @pytest.fixture
    def trace(self, tiny_model, tiny_dataset, filter_config):
        trajectory = tiny_dataset.trajectories_in('test')[0]
        return run_filter(tiny_model, trajectory, filter_config,
                          tiny_dataset.objects[trajectory.object_id].nominal_cloud,
                          contact=ContactConfig(grid_res=16))

    def test_metrics_per_step(self, trace, generator_config):
        frame = trace.to_frame()
        assert list(frame.columns) == METRIC_COLUMNS
        assert len(frame) == generator_config.steps
        assert np.isnan(frame['cd_pred'].iloc[0])
        assert frame['cd_pred'].iloc[1:].notna().all()
        assert frame['cd_est'].notna().all()
        assert ((frame['max_weight'] > 0) & (frame['max_weight'] <= 1)).all()

    def test_estimate_is_best_weighted_particle(self, trace):
        for record in trace.records:
            assert record.estimate_index == int(np.argmax(record.weights))
            np.testing.assert_array_equal(record.estimate, record.particles[record.estimate_index])

    def test_same_seed_same_trace(self, trace, tiny_model, tiny_dataset, filter_config):
        trajectory = tiny_dataset.trajectories_in('test')[0]
        again = run_filter(tiny_model, trajectory, filter_config,
                           tiny_dataset.objects[trajectory.object_id].nominal_cloud,
                           contact=ContactConfig(grid_res=16))
        pd.testing.assert_frame_equal(trace.to_frame(), again.to_frame())

    def test_wrong_code_shape_rejected(self, tiny_model, tiny_dataset, filter_config):
        trajectory = tiny_dataset.trajectories_in('test')[0]
        with pytest.raises(ConfigurationError):
            run_filter(tiny_model, trajectory, filter_config,
                       tiny_dataset.objects[trajectory.object_id].nominal_cloud, alpha=np.zeros(2))

    def test_write_trace(self, trace, tmp_path, tiny_model):
        csv_path = write_trace(trace, tmp_path, config_digest='abc', seed=9)
        frame = read_csv(csv_path)
        assert (frame['config_hash'] == 'abc').all()
        assert (frame['seed'] == 9).all()
        arrays = decode_blob((tmp_path / f"{trace.trajectory_id}.trace.bin").read_bytes())
        assert arrays['step0000.particles'].shape == (4, tiny_model.config.contact_dim)
        assert 'step0000.reconstruction' in arrays
