"""
Dataset generation: objects, train/test/unseen trajectories, concurrent workers.

Every object and trajectory draws from its own child of the master
SeedSequence, so worker scheduling never changes the output.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from ..utils.performance_monitor import PerformanceMonitor
from .chain import build_chain_object, chain_object_record, gen_chain_trajectory, random_chain_spec
from .dataset import Dataset, GeneratorConfig, Trajectory
from .paddle import build_paddle_object, gen_paddle_trajectory, paddle_object_record, random_paddle_spec

logger = logging.getLogger(__name__)


@dataclass
class _TrajectoryJob:
    trajectory_id: str
    split: str
    occlusion_ratio: float
    seed: np.random.SeedSequence
    run: Callable[['_TrajectoryJob'], Trajectory]


def _object_ids(config: GeneratorConfig) -> List[tuple]:
    prefix = config.object_type
    ids = [(f"{prefix}-{i:02d}", 'train') for i in range(config.n_train_objects)]
    ids += [(f"{prefix}-u{i:02d}", 'unseen') for i in range(config.n_unseen_objects)]
    return ids


def generate_dataset(config: GeneratorConfig, seed: int, monitor: Optional[PerformanceMonitor] = None,
                     workers: Optional[int] = None) -> Dataset:
    """Build objects serially, then generate all trajectories on a thread pool"""
    monitor = monitor or PerformanceMonitor(show_progress=False)
    root = np.random.SeedSequence(int(seed))
    object_ids = _object_ids(config)
    object_seqs = root.spawn(len(object_ids))

    objects = {}
    jobs: List[_TrajectoryJob] = []
    with monitor.track_operation('build_objects', total_items=len(object_ids)) as update:
        for (object_id, split), seq in zip(object_ids, object_seqs):
            spec_seq, record_seq, probe_seq, trajectory_seq = seq.spawn(4)
            spec_rng = np.random.default_rng(spec_seq)
            unseen = split == 'unseen'
            if config.object_type == 'paddle':
                spec = random_paddle_spec(object_id, spec_rng, unseen=unseen)
                obj = build_paddle_object(spec, config.scale_box, seed=probe_seq)
                record = paddle_object_record(obj, split, config, record_seq)
            else:
                spec = random_chain_spec(object_id, spec_rng, config.chain, unseen=unseen)
                obj = build_chain_object(spec, config.chain, config.scale_box)
                record = chain_object_record(obj, split, config, record_seq)
            objects[object_id] = record
            jobs.extend(_jobs_for(obj, object_id, split, config, trajectory_seq))
            update(1)

    with monitor.track_operation('generate_trajectories', total_items=len(jobs)) as update:
        with ThreadPoolExecutor(max_workers=max(1, workers or config.workers)) as pool:
            trajectories = []
            for trajectory in pool.map(lambda job: job.run(job), jobs):
                trajectories.append(trajectory)
                update(1)

    dataset = Dataset(objects, trajectories, {'generator': config.to_dict()}, int(seed))
    counts = {split: len(dataset.trajectories_in(split)) for split in ('train', 'test', 'unseen')}
    logger.info(f"Generated {len(objects)} {config.object_type} objects; trajectories per split: {counts}")
    return dataset


def _jobs_for(obj, object_id: str, split: str, config: GeneratorConfig,
              seq: np.random.SeedSequence) -> List[_TrajectoryJob]:
    if split == 'unseen':
        plan = [('unseen', config.occlusion_ratio)] * config.unseen_trajectories_per_object
    else:
        n_test = config.test_trajectories_per_object
        plan = [('train', 0.0)] * (config.trajectories_per_object - n_test) + [('test', config.occlusion_ratio)] * n_test

    if config.object_type == 'paddle':
        def run(job: _TrajectoryJob) -> Trajectory:
            return gen_paddle_trajectory(obj, job.seed, config.steps, config.action_box, config=config,
                                         trajectory_id=job.trajectory_id, split=job.split,
                                         occlusion_ratio=job.occlusion_ratio)
    else:
        def run(job: _TrajectoryJob) -> Trajectory:
            return gen_chain_trajectory(obj, job.seed, config.steps, config=config,
                                        trajectory_id=job.trajectory_id, split=job.split,
                                        occlusion_ratio=job.occlusion_ratio,
                                        mode='grid' if job.split == 'train' else 'uniform')

    seeds = seq.spawn(len(plan))
    return [_TrajectoryJob(f"{object_id}-{split_name}-{i:02d}", split_name, ratio, child, run)
            for i, ((split_name, ratio), child) in enumerate(zip(plan, seeds))]
