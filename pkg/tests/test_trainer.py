#!/usr/bin/env python3
"""
Tests for nominal pretraining, dynamics training, checkpoints and code inference
"""

from dataclasses import replace

import numpy as np
import pytest

from implicit_deform.diffcore import AdamState, ParamVector
from implicit_deform.losses import LossReport, LossWeights
from implicit_deform.model import ImplicitDeformModel
from implicit_deform.trainer import (TrainConfig, infer_object_code, load_checkpoint, pretrain_nominal,
                                     save_checkpoint, train_dynamics)
from implicit_deform.utils.artifacts import read_csv
from implicit_deform.utils.error_handler import ConfigurationError, DataError, TrainingDivergedError


@pytest.fixture
def pretrained(tiny_dataset, train_config, model_config):
    return pretrain_nominal(tiny_dataset, train_config, model_config).model


@pytest.mark.unit
class TestTrainConfig:
    """Training settings"""

    def test_unknown_ablation_rejected(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(ablation='frozen')

    def test_epochs_at_least_one(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(epochs=0)

    def test_dict_round_trip_keeps_weights(self, train_config):
        restored = TrainConfig.from_dict(train_config.to_dict())
        assert restored == train_config
        assert restored.weights.horizon == 2


@pytest.mark.unit
class TestCheckpoints:
    """Checkpoint files"""

    def test_round_trip_with_optimizer_state(self, tiny_model, model_config, train_config, tmp_path):
        packed = ParamVector(np.arange(3.0), [('w', (3,))])
        adam = AdamState(np.array([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 3.0]), step=7, lr=train_config.lr)
        c0 = ParamVector(np.array([0.5, -0.5]), [('c0.t', (2,))])
        path = save_checkpoint(tmp_path / 'run.ckpt', tiny_model, 'dynamics', 4, train_config, adam, packed,
                               {'c0': c0}, run_config={'seed': 3})
        ckpt = load_checkpoint(path, model_config)
        assert (ckpt.phase, ckpt.epoch) == ('dynamics', 4)
        assert ckpt.adam.step == 7
        np.testing.assert_array_equal(ckpt.adam.v, adam.v)
        np.testing.assert_array_equal(ckpt.extras['c0'].values, c0.values)
        assert ckpt.metadata['run_config'] == {'seed': 3}
        assert 'adam.m' not in ckpt.extras

    def test_unknown_phase_rejected(self, tiny_model, train_config, tmp_path):
        path = save_checkpoint(tmp_path / 'odd.ckpt', tiny_model, 'finetune', 1, train_config)
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)

    def test_config_mismatch_rejected(self, tiny_model, model_config, train_config, tmp_path):
        path = save_checkpoint(tmp_path / 'run.ckpt', tiny_model, 'nominal', 1, train_config)
        with pytest.raises(ConfigurationError):
            load_checkpoint(path, replace(model_config, contact_dim=5))


@pytest.mark.integration
class TestPretraining:
    """Phase 1"""

    def test_outputs_written(self, tiny_dataset, train_config, model_config, tmp_path):
        result = pretrain_nominal(tiny_dataset, train_config, model_config, out_dir=tmp_path)
        assert len(result.history) == train_config.epochs
        assert sorted(result.model.codes) == ['paddle-00']
        assert (tmp_path / 'nominal.ckpt').exists()
        log = read_csv(tmp_path / 'pretrain_log.csv')
        assert {'total', 'loss_sdf', 'grad_norm', 'epoch', 'seed'} <= set(log.columns)
        cd = read_csv(tmp_path / 'nominal_cd.csv')
        assert list(cd['object_id']) == ['paddle-00']
        assert np.isfinite(cd['nominal_cd']).all()

    def test_parameters_move(self, tiny_dataset, train_config, model_config):
        start = ImplicitDeformModel.initialize(model_config, train_config.seed, ['paddle-00'],
                                               train_config.code_init_std)
        trained = pretrain_nominal(tiny_dataset, train_config, model_config).model
        assert trained.object_hyper.fingerprint() != start.object_hyper.fingerprint()
        np.testing.assert_array_equal(trained.deform_hyper.values, start.deform_hyper.values)

    @pytest.mark.slow
    def test_resume_reproduces_uninterrupted_run(self, tiny_dataset, train_config, model_config, tmp_path):
        """Stopping after one epoch and resuming gives the same weights as running two epochs"""
        straight = pretrain_nominal(tiny_dataset, replace(train_config, epochs=2), model_config)
        pretrain_nominal(tiny_dataset, replace(train_config, epochs=1), model_config, out_dir=tmp_path)
        resumed = pretrain_nominal(tiny_dataset, replace(train_config, epochs=2), model_config,
                                   resume=tmp_path / 'nominal.ckpt')
        np.testing.assert_array_equal(resumed.model.object_hyper.values, straight.model.object_hyper.values)
        np.testing.assert_array_equal(resumed.model.code('paddle-00'), straight.model.code('paddle-00'))
        assert resumed.adam.step == straight.adam.step

    def test_divergence_saves_last_good_state(self, tiny_dataset, train_config, model_config, tmp_path, mocker):
        mocker.patch('implicit_deform.trainer.loss_nominal',
                     return_value=LossReport(terms={}, weighted={}, total=float('nan')))
        with pytest.raises(TrainingDivergedError) as info:
            pretrain_nominal(tiny_dataset, train_config, model_config, out_dir=tmp_path)
        assert info.value.epoch == 0
        assert isinstance(info.value.last_good_state, ImplicitDeformModel)
        assert (tmp_path / 'nominal.ckpt').exists()

    def test_no_training_objects(self, tiny_dataset, train_config, model_config):
        empty = replace(tiny_dataset, objects={}, trajectories=[])
        with pytest.raises(DataError):
            pretrain_nominal(empty, train_config, model_config)


@pytest.mark.integration
class TestDynamicsTraining:
    """Phase 2"""

    def test_outputs_and_frozen_groups(self, tiny_dataset, pretrained, train_config, tmp_path):
        result = train_dynamics(tiny_dataset, pretrained, train_config, out_dir=tmp_path)
        assert (tmp_path / 'dynamics-none.ckpt').exists()
        assert len(read_csv(tmp_path / 'dynamics_log-none.csv')) == train_config.dynamics_epochs
        np.testing.assert_array_equal(result.model.object_hyper.values, pretrained.object_hyper.values)
        np.testing.assert_array_equal(result.model.code('paddle-00'), pretrained.code('paddle-00'))
        trajectory_ids = [t.trajectory_id for t in tiny_dataset.trajectories_in('train')]
        assert [name for name, _ in result.extras['c0'].layout] == [f"c0.{t}" for t in sorted(trajectory_ids)]

        ckpt = load_checkpoint(tmp_path / 'dynamics-none.ckpt')
        assert ckpt.phase == 'dynamics'
        np.testing.assert_array_equal(ckpt.model.force.values, result.model.force.values)
        np.testing.assert_array_equal(ckpt.extras['c0'].values, result.extras['c0'].values)

    def test_rigid_ablation_output_name(self, tiny_dataset, pretrained, train_config, tmp_path):
        result = train_dynamics(tiny_dataset, pretrained, replace(train_config, ablation='rigid'), out_dir=tmp_path)
        assert result.model.config.rigid
        assert (tmp_path / 'dynamics-rigid.ckpt').exists()

    def test_cannot_resume_from_nominal_checkpoint(self, tiny_dataset, train_config, model_config, tmp_path):
        result = pretrain_nominal(tiny_dataset, train_config, model_config, out_dir=tmp_path)
        with pytest.raises(ConfigurationError):
            train_dynamics(tiny_dataset, result.model, train_config, resume=tmp_path / 'nominal.ckpt')

    def test_missing_object_codes(self, tiny_dataset, model_config, train_config):
        bare = ImplicitDeformModel.initialize(model_config, 0)
        with pytest.raises(ConfigurationError):
            train_dynamics(tiny_dataset, bare, train_config)

    def test_horizon_longer_than_trajectories(self, tiny_dataset, pretrained, train_config):
        with pytest.raises(DataError):
            train_dynamics(tiny_dataset, pretrained, replace(train_config, weights=LossWeights(horizon=10)))


@pytest.mark.integration
class TestCodeInference:
    """Fitting a code for an unseen object"""

    def test_networks_stay_frozen(self, tiny_dataset, pretrained, train_config):
        before = {name: params.fingerprint() for name, params in pretrained.param_groups().items()}
        record = tiny_dataset.objects['paddle-u00']
        inferred = infer_object_code(pretrained, record.samples, train_config, record.nominal_cloud)
        assert {name: p.fingerprint() for name, p in pretrained.param_groups().items()} == before
        assert inferred.code.shape == (pretrained.config.latent_dim,)
        assert len(inferred.history) == train_config.infer_iterations
        assert np.isfinite(inferred.cd)

    def test_zero_iterations_returns_seeded_start(self, tiny_dataset, pretrained, train_config):
        record = tiny_dataset.objects['paddle-u00']
        a = infer_object_code(pretrained, record.samples, train_config, iterations=0, seed=4)
        b = infer_object_code(pretrained, record.samples, train_config, iterations=0, seed=4)
        np.testing.assert_array_equal(a.code, b.code)
        assert np.isnan(a.cd)
        assert a.history.empty
