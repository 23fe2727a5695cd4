#!/usr/bin/env python3
"""
Tests for the nominal, geometry and horizon dynamics losses
"""

from dataclasses import replace

import numpy as np
import pytest

from implicit_deform.diffcore import constant, grad, leaf
from implicit_deform.geometry import PointCloud
from implicit_deform.losses import (DynamicsVars, LossWeights, clamp_sd, loss_dynamics_total, loss_geo, loss_nominal,
                                    nominal_terms, normal_alignment, sdf_regression, unroll_contact)
from implicit_deform.model import ImplicitDeformModel
from implicit_deform.utils.error_handler import BoundsError, ConfigurationError, DataError


def dynamics_vars(model, c_start):
    return DynamicsVars(leaf(model.deform_hyper.values), leaf(model.force.values), leaf(model.action.values),
                        leaf(c_start))


@pytest.mark.unit
class TestLossWeights:
    """Weight validation"""

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigurationError):
            LossWeights(lam3=-1.0)

    def test_non_positive_delta_rejected(self):
        with pytest.raises(ConfigurationError):
            LossWeights(delta=0.0)

    def test_horizon_at_least_one(self):
        with pytest.raises(ConfigurationError):
            LossWeights(horizon=0)

    def test_geometry_weights(self):
        weights = LossWeights()
        assert weights.geo_weight('min_correction') == weights.lam5
        assert weights.geo_weight('sdf') == weights.lam8

    def test_from_dict_ignores_unknown_keys(self):
        assert LossWeights.from_dict({'horizon': 2, 'other': 1}).horizon == 2


@pytest.mark.unit
class TestLossTerms:
    """Elementary terms on arrays"""

    def test_clamp(self):
        np.testing.assert_array_equal(clamp_sd(np.array([-0.5, 0.05, 0.5]), 0.1), [-0.1, 0.05, 0.1])
        assert clamp_sd(0.3, 0.1) == 0.1

    def test_clamp_needs_positive_delta(self):
        with pytest.raises(ConfigurationError):
            clamp_sd(0.3, 0.0)

    def test_normal_alignment_range(self):
        normals = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        assert float(normal_alignment(constant(normals * 3.0), normals).value) == pytest.approx(0.0)
        assert float(normal_alignment(constant(-normals), normals).value) == pytest.approx(2.0)

    def test_regression_is_clamped(self):
        """Far-field errors beyond delta contribute nothing"""
        value = sdf_regression(constant(np.array([0.5, 0.02])), np.array([0.9, 0.0]), 0.1)
        assert float(value.value) == pytest.approx(0.01)

    def test_perfect_prediction_has_zero_shape_terms(self):
        target_sd = np.array([0.0, 0.2, -0.05])
        normals = np.array([[0.0, 1.0, 0.0]])
        terms = nominal_terms(target_sd, target_sd, normals, normals, np.zeros(4), np.zeros(10), LossWeights())
        assert float(terms['sdf'].value) == 0.0
        assert float(terms['normal'].value) == pytest.approx(0.0)
        assert float(terms['latent'].value) == 0.0


@pytest.mark.unit
class TestNominalLoss:
    """Nominal pretraining objective"""

    def test_total_is_weighted_sum(self, tiny_model, tiny_dataset):
        record = tiny_dataset.objects_in('train')[0]
        samples = {record.object_id: record.samples.subsample(16, 32, np.random.default_rng(0))}
        weights = LossWeights()
        report = loss_nominal(tiny_model, samples, weights)
        assert set(report.terms) == {'sdf', 'normal', 'latent', 'hyper'}
        assert report.weighted['normal'] == pytest.approx(weights.lam * report.terms['normal'])
        assert report.total == pytest.approx(sum(report.weighted.values()))
        assert report.as_row()['total'] == report.total

    def test_code_gradient_matches_finite_differences(self, tiny_model, tiny_dataset):
        record = tiny_dataset.objects_in('train')[0]
        object_id = record.object_id
        samples = {object_id: record.samples.subsample(8, 16, np.random.default_rng(1))}
        weights = LossWeights()
        alpha0 = tiny_model.code(object_id)
        alpha = leaf(alpha0)
        report = loss_nominal(tiny_model, samples, weights, codes={object_id: alpha})
        (g,) = grad(report.total_var, [alpha])

        def total(values):
            return loss_nominal(tiny_model.with_params(codes={**tiny_model.codes, object_id: values}),
                                samples, weights).total

        for index in range(len(alpha0)):
            step = np.zeros_like(alpha0)
            step[index] = 1e-6
            fd = (total(alpha0 + step) - total(alpha0 - step)) / 2e-6
            assert g.value[index] == pytest.approx(fd, rel=1e-3, abs=1e-4)

    def test_empty_sample_dict_rejected(self, tiny_model):
        with pytest.raises(DataError):
            loss_nominal(tiny_model, {}, LossWeights())


@pytest.mark.unit
class TestGeometryLoss:
    """Per-frame geometry loss"""

    def test_training_mode_terms(self, tiny_model, tiny_dataset, model_config):
        trajectory = tiny_dataset.trajectories_in('train')[0]
        frame = trajectory.transitions[0]
        nominal = tiny_dataset.objects[trajectory.object_id].nominal_cloud
        report = loss_geo(tiny_model, tiny_model.code(trajectory.object_id), np.zeros(model_config.force_dim),
                          frame.observed, nominal, frame.samples, LossWeights())
        assert set(report.terms) == {'min_correction', 'correspondence', 'normal', 'sdf'}
        assert all(np.isfinite(v) for v in report.terms.values())

    def test_refine_mode_without_normal_term(self, tiny_model, tiny_dataset, model_config):
        trajectory = tiny_dataset.trajectories_in('train')[0]
        nominal = tiny_dataset.objects[trajectory.object_id].nominal_cloud
        report = loss_geo(tiny_model, tiny_model.code(trajectory.object_id), np.zeros(model_config.force_dim),
                          trajectory.transitions[0].observed, nominal, None, LossWeights(), refine=True)
        assert set(report.terms) == {'min_correction', 'correspondence', 'sdf'}

    def test_no_observation_keeps_only_minimum_correction(self, tiny_model, tiny_dataset, model_config):
        record = tiny_dataset.objects_in('train')[0]
        report = loss_geo(tiny_model, tiny_model.code(record.object_id), np.zeros(model_config.force_dim),
                          None, record.nominal_cloud, None, LossWeights(), refine=True)
        assert set(report.terms) == {'min_correction'}

    def test_rigid_variant_has_no_correction(self, model_config, tiny_dataset):
        record = tiny_dataset.objects_in('train')[0]
        rigid = ImplicitDeformModel.initialize(replace(model_config, ablation='rigid'), 0, [record.object_id])
        report = loss_geo(rigid, rigid.code(record.object_id), np.zeros(model_config.force_dim),
                          PointCloud(record.nominal_cloud.points[:20]), record.nominal_cloud, None, LossWeights(),
                          refine=True)
        assert report.terms['min_correction'] == 0.0

    def test_empty_nominal_cloud_rejected(self, tiny_model, model_config):
        from implicit_deform.losses import geo_terms
        with pytest.raises(DataError):
            geo_terms(tiny_model, None, None, None, np.zeros((0, 3)), None, LossWeights(), refine=True)


@pytest.mark.unit
class TestDynamicsLoss:
    """Horizon loss with recursive contact embeddings"""

    def test_contact_feeds_forward(self, tiny_model, tiny_dataset, model_config):
        """The embedding used at step t+1 is the one predicted at step t"""
        trajectory = tiny_dataset.trajectories_in('train')[0]
        weights = LossWeights(horizon=2)
        c0 = np.full(model_config.contact_dim, 0.01)
        alpha = tiny_model.code(trajectory.object_id)
        nominal = tiny_dataset.objects[trajectory.object_id].nominal_cloud
        report = loss_dynamics_total(tiny_model, alpha, nominal, trajectory.transitions[:3], weights,
                                     dynamics_vars(tiny_model, c0))
        assert len(report.trace) == 2
        np.testing.assert_array_equal(report.trace[0]['c_in'], c0)
        np.testing.assert_array_equal(report.trace[1]['c_in'], report.trace[0]['c_pred'])
        assert {'pred', 'reg', 'sdf', 'min_correction'} <= set(report.terms)
        np.testing.assert_allclose(unroll_contact(tiny_model, alpha, c0, trajectory.transitions, 1),
                                   report.trace[0]['c_pred'], rtol=1e-12, atol=1e-14)

    def test_total_differentiable_in_start_contact(self, tiny_model, tiny_dataset, model_config):
        trajectory = tiny_dataset.trajectories_in('train')[0]
        params = dynamics_vars(tiny_model, np.zeros(model_config.contact_dim))
        report = loss_dynamics_total(tiny_model, tiny_model.code(trajectory.object_id),
                                     tiny_dataset.objects[trajectory.object_id].nominal_cloud,
                                     trajectory.transitions[:2], LossWeights(horizon=1), params)
        g_c, g_force = grad(report.total_var, [params.c_start, params.force])
        assert np.all(np.isfinite(g_c.value))
        assert np.any(g_force.value != 0)

    def test_window_shorter_than_horizon_rejected(self, tiny_model, tiny_dataset, model_config):
        trajectory = tiny_dataset.trajectories_in('train')[0]
        with pytest.raises(BoundsError):
            loss_dynamics_total(tiny_model, tiny_model.code(trajectory.object_id),
                                tiny_dataset.objects[trajectory.object_id].nominal_cloud,
                                trajectory.transitions[:2], LossWeights(horizon=2),
                                dynamics_vars(tiny_model, np.zeros(model_config.contact_dim)))

    def test_zero_steps_returns_start(self, tiny_model, tiny_dataset, model_config):
        trajectory = tiny_dataset.trajectories_in('train')[0]
        c0 = np.arange(model_config.contact_dim, dtype=float)
        np.testing.assert_array_equal(unroll_contact(tiny_model, tiny_model.code(trajectory.object_id), c0,
                                                     trajectory.transitions, 0), c0)
