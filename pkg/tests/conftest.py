"""
Shared fixtures: tiny model and generator settings so the suite runs in seconds.
"""

import json
import logging
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from implicit_deform.inference import FilterConfig
from implicit_deform.losses import LossWeights
from implicit_deform.model import ImplicitDeformModel, ModelConfig
from implicit_deform.synthgen import GeneratorConfig, generate_dataset, write_dataset
from implicit_deform.trainer import TrainConfig
from implicit_deform.utils.config_loader import load_config

TINY_MODEL = dict(latent_dim=4, force_dim=4, contact_dim=3, object_hidden=(16,), deform_hidden=(16,),
                  hyper_hidden=(16,), force_hidden=(16,), action_hidden=(16,))

TINY_GENERATOR = dict(n_train_objects=1, n_unseen_objects=1, trajectories_per_object=2,
                      test_trajectories_per_object=1, unseen_trajectories_per_object=1, steps=4,
                      n_surface=64, n_query=128, n_cloud=256, workers=1)

TINY_TRAIN = dict(lr=0.001, epochs=2, steps_per_epoch=1, dynamics_epochs=1, windows_per_epoch=2, surface_batch=16,
                  query_batch=32, infer_iterations=2, eval_points=64, recon_resolution=12)

TINY_FILTER = dict(particles=4, refine_epochs=1, recon_resolution=12, eval_points=64)


def tiny_overrides():
    """--set assignments shrinking the default run configuration"""
    sections = {'model': TINY_MODEL, 'generator': TINY_GENERATOR, 'train': TINY_TRAIN, 'filter': TINY_FILTER}
    assignments = [f"{section}.{key}={json.dumps(list(value) if isinstance(value, tuple) else value)}"
                   for section, values in sections.items() for key, value in values.items()]
    return assignments + ['train.weights.horizon=2', 'contact.grid_res=16']


@pytest.fixture(autouse=True)
def package_logger():
    """CLI runs detach the package logger from the root; reattach it so caplog sees records"""
    logger = logging.getLogger('implicit_deform')
    yield logger
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    logger.propagate = True
    logger.setLevel(logging.NOTSET)


@pytest.fixture
def model_config():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture(scope='session')
def generator_config():
    return GeneratorConfig(**TINY_GENERATOR)


@pytest.fixture(scope='session')
def tiny_dataset(generator_config):
    return generate_dataset(generator_config, seed=3)


@pytest.fixture(scope='session')
def dataset_dir(tiny_dataset, tmp_path_factory):
    return write_dataset(tiny_dataset, tmp_path_factory.mktemp('data') / 'dataset')


@pytest.fixture
def tiny_model(model_config, tiny_dataset):
    return ImplicitDeformModel.initialize(model_config, seed=0, object_ids=sorted(tiny_dataset.objects))


@pytest.fixture
def train_config():
    return TrainConfig(**TINY_TRAIN, weights=LossWeights(horizon=2))


@pytest.fixture
def filter_config():
    return FilterConfig(**TINY_FILTER)


@pytest.fixture
def run_config():
    """Validated full configuration at tiny scale, seed 3"""
    return load_config(overrides=tiny_overrides(), seed=3)


@pytest.fixture
def sphere_sdf():
    """Radius-0.5 sphere: batched sdf and sdf-with-gradient callables"""
    def sdf(points):
        return np.linalg.norm(np.asarray(points).reshape(-1, 3), axis=1) - 0.5

    def sdf_and_grad(points):
        points = np.asarray(points).reshape(-1, 3)
        r = np.linalg.norm(points, axis=1)
        return r - 0.5, points / np.maximum(r, 1e-12)[:, None]

    return sdf, sdf_and_grad


@pytest.fixture
def sphere_points():
    """Factory for points spread uniformly over a sphere"""
    def make(count, radius=0.5, seed=0):
        rng = np.random.default_rng(seed)
        directions = rng.normal(size=(count, 3))
        return radius * directions / np.linalg.norm(directions, axis=1, keepdims=True)

    return make
