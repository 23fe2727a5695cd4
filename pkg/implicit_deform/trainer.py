"""
Two-phase training and unseen-object code inference.

Phase 1 (nominal): the object hypernetwork and one latent code per training
object fit the nominal SDF samples (auto-decoder).
Phase 2 (dynamics): with the object hypernetwork and codes frozen, the
deformation hypernetwork, the force and action modules and one initial
contact embedding per training trajectory fit horizon windows of transitions.

Every epoch draws its mini-batches from its own generator keyed by
(seed, phase, epoch), so a run resumed from a checkpoint reproduces the
uninterrupted one.
"""

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .diffcore import AdamState, ParamVector, Var, adam_step, global_norm_clip, grad, leaf, no_grad
from .diffcore.tape import constant, getitem
from .geometry import PointCloud, SdfSampleSet, chamfer_x1e3
from .inference import reconstruct_surface
from .losses import DynamicsVars, LossWeights, loss_dynamics_total, loss_nominal, unroll_contact
from .model import (ABLATIONS, ImplicitDeformModel, ModelConfig, NormalizationStats, decode_object_weights,
                    load_model)
from .utils.artifacts import atomic_write_csv
from .utils.error_handler import ConfigurationError, DataError, TrainingDivergedError
from .utils.performance_monitor import PerformanceMonitor

logger = logging.getLogger(__name__)

PRETRAIN_STREAM = 11
DYNAMICS_STREAM = 12
INFER_STREAM = 13
C0_STREAM = 14
EVAL_STREAM = 15

PHASES = ('nominal', 'dynamics')


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 200
    steps_per_epoch: int = 10
    dynamics_epochs: int = 200
    windows_per_epoch: int = 8
    grad_clip: float = 1.0
    surface_batch: int = 128
    query_batch: int = 256
    code_init_std: float = 0.01
    c0_init_std: float = 0.01
    infer_iterations: int = 300
    infer_lr: float = 1e-3
    eval_points: int = 1024
    recon_resolution: int = 48
    checkpoint_every: int = 0
    ablation: str = 'none'
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.lr <= 0 or self.infer_lr <= 0:
            raise ConfigurationError(f"Learning rates must be positive (lr={self.lr}, infer_lr={self.infer_lr})")
        if self.epochs < 1 or self.dynamics_epochs < 1:
            raise ConfigurationError("Epoch counts must be at least 1")
        if self.steps_per_epoch < 1:
            raise ConfigurationError(f"steps_per_epoch must be at least 1, got {self.steps_per_epoch}")
        if self.infer_iterations < 0:
            raise ConfigurationError(f"infer_iterations must be non-negative, got {self.infer_iterations}")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"Unknown ablation '{self.ablation}', choose from {ABLATIONS}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainConfig':
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__ and k != 'weights'}
        weights = data.get('weights')
        if isinstance(weights, LossWeights):
            known['weights'] = weights
        elif weights is not None:
            known['weights'] = LossWeights.from_dict(weights)
        return cls(**known)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['weights'] = self.weights.to_dict()
        return data

    @property
    def no_contact_embedding(self) -> bool:
        return self.ablation == 'no-ct'

    @property
    def rigid_baseline(self) -> bool:
        return self.ablation == 'rigid'


@dataclass
class TrainResult:
    model: ImplicitDeformModel
    history: pd.DataFrame
    epoch: int
    adam: Optional[AdamState] = None
    extras: Dict[str, ParamVector] = field(default_factory=dict)
    object_cd: Optional[pd.DataFrame] = None


@dataclass
class Checkpoint:
    model: ImplicitDeformModel
    phase: str
    epoch: int
    adam: Optional[AdamState]
    extras: Dict[str, ParamVector]
    metadata: Dict[str, Any]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], model: ImplicitDeformModel, phase: str, epoch: int,
                    config: TrainConfig, adam: Optional[AdamState] = None, packed: Optional[ParamVector] = None,
                    extras: Optional[Dict[str, ParamVector]] = None,
                    run_config: Optional[Dict[str, Any]] = None) -> Path:
    """Model groups plus optimizer moments, the epoch counter and the config echo"""
    groups = dict(extras or {})
    metadata: Dict[str, Any] = {'phase': phase, 'epoch': int(epoch), 'train_config': config.to_dict()}
    if adam is not None and packed is not None:
        groups['adam.m'], groups['adam.v'] = adam.as_params(packed)
        metadata['adam_step'] = int(adam.step)
    if run_config is not None:
        metadata['run_config'] = run_config
    return model.save(path, extra_groups=groups, extra_metadata=metadata)


def load_checkpoint(path: Union[str, Path], expected: Optional[ModelConfig] = None) -> Checkpoint:
    model, extras, metadata = load_model(path, expected)
    phase = metadata.get('phase', 'nominal')
    if phase not in PHASES:
        raise ConfigurationError(f"Checkpoint {path} has unknown phase '{phase}'")
    adam = None
    if 'adam.m' in extras and 'adam.v' in extras:
        lr = TrainConfig.from_dict(metadata.get('train_config', {})).lr
        adam = AdamState(extras['adam.m'].values.copy(), extras['adam.v'].values.copy(),
                         int(metadata.get('adam_step', 0)), lr)
    others = {k: v for k, v in extras.items() if k not in ('adam.m', 'adam.v')}
    return Checkpoint(model, phase, int(metadata.get('epoch', 0)), adam, others, metadata)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _pack(parts: Dict[str, np.ndarray]) -> ParamVector:
    """One flat trainable vector; every part is a single 1-D entry"""
    return ParamVector(np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in parts.values()]),
                       [(name, (int(np.asarray(v).size),)) for name, v in parts.items()])


def _split(packed: ParamVector, flat: Var) -> Dict[str, Var]:
    return {name: getitem(flat, slice(start, stop)) for name, (start, stop, _) in packed.offsets.items()}


def _diverged(message: str, model: ImplicitDeformModel, epoch: int, path: Optional[Path], phase: str,
              config: TrainConfig, extras: Optional[Dict[str, ParamVector]] = None):
    if path is not None:
        save_checkpoint(path, model, phase, epoch, config, extras=extras)
        logger.error(f"{message}; last good state saved to {path}")
    else:
        logger.error(message)
    raise TrainingDivergedError(message, last_good_state=model, epoch=epoch)


def _optimizer_step(packed: ParamVector, state: AdamState, flat: Var, total: Var,
                    clip: float) -> Tuple[Optional[ParamVector], AdamState, float]:
    (g,) = grad(total, [flat])
    if not np.all(np.isfinite(g.value)):
        return None, state, float('nan')
    clipped, norm = global_norm_clip(g.value, clip)
    updated, state = adam_step(state, packed, clipped)
    return updated, state, norm


def nominal_cd_table(model: ImplicitDeformModel, objects: Sequence[Any], config: TrainConfig) -> pd.DataFrame:
    """Per-object CD(×10³) between the reconstructed nominal surface and the nominal cloud"""
    rows = []
    for record in objects:
        rng = np.random.default_rng([config.seed, EVAL_STREAM])
        recon = reconstruct_surface(model, model.code(record.object_id), None, config.recon_resolution,
                                    fallback_points=config.eval_points)
        cd = chamfer_x1e3(recon.sample(config.eval_points, rng), record.nominal_cloud.sample(config.eval_points, rng))
        rows.append({'object_id': record.object_id, 'split': record.split, 'nominal_cd': cd})
    return pd.DataFrame(rows, columns=['object_id', 'split', 'nominal_cd'])


# ---------------------------------------------------------------------------
# Phase 1: nominal pretraining
# ---------------------------------------------------------------------------

def pretrain_nominal(dataset, config: TrainConfig, model_config: ModelConfig = ModelConfig(),
                     out_dir: Optional[Union[str, Path]] = None, resume: Optional[Union[str, Path]] = None,
                     monitor: Optional[PerformanceMonitor] = None,
                     run_config: Optional[Dict[str, Any]] = None) -> TrainResult:
    """Fit Ψ_o and the training-object codes to the nominal SDF samples"""
    objects = sorted(dataset.objects_in('train'), key=lambda r: r.object_id)
    if not objects:
        raise DataError("Nominal pretraining needs at least one training object")
    object_ids = [r.object_id for r in objects]
    out = Path(out_dir) if out_dir is not None else None
    checkpoint_path = out / 'nominal.ckpt' if out is not None else None
    monitor = monitor or PerformanceMonitor(show_progress=False)

    start_epoch = 0
    if resume is not None:
        ckpt = load_checkpoint(resume, replace(model_config, ablation='none'))
        if ckpt.phase != 'nominal':
            raise ConfigurationError(f"Cannot resume nominal pretraining from a '{ckpt.phase}' checkpoint")
        model, start_epoch = ckpt.model, ckpt.epoch
        logger.info(f"Resuming nominal pretraining from epoch {start_epoch}")
    else:
        model = ImplicitDeformModel.initialize(replace(model_config, ablation='none'), config.seed, object_ids,
                                               config.code_init_std)

    packed = _pack({'object_hyper': model.object_hyper.values,
                    **{f"alpha.{oid}": model.code(oid) for oid in object_ids}})
    adam = AdamState.create(packed, config.lr)
    if resume is not None and ckpt.adam is not None:
        adam = replace(ckpt.adam, lr=config.lr)

    def current_model(values: ParamVector) -> ImplicitDeformModel:
        hyper = model.object_hyper.replace(values.view('object_hyper'))
        return model.with_params(object_hyper=hyper,
                                 codes={oid: values.view(f"alpha.{oid}").copy() for oid in object_ids})

    history: List[Dict[str, Any]] = []
    started = time.time()
    logger.info(f"Nominal pretraining: {len(objects)} objects, {len(packed):,} parameters, "
                f"epochs {start_epoch}..{config.epochs}")
    with monitor.track_operation('pretrain_nominal', total_items=config.epochs - start_epoch) as update:
        for epoch in range(start_epoch, config.epochs):
            rng = np.random.default_rng([config.seed, PRETRAIN_STREAM, epoch])
            rows = []
            for _ in range(config.steps_per_epoch):
                batch = {r.object_id: r.samples.subsample(config.surface_batch, config.query_batch, rng)
                         for r in objects}
                flat = leaf(packed.values)
                parts = _split(packed, flat)
                report = loss_nominal(model, batch, config.weights, parts['object_hyper'],
                                      {oid: parts[f"alpha.{oid}"] for oid in object_ids})
                if not np.isfinite(report.total):
                    _diverged(f"Nominal loss is not finite at epoch {epoch}", current_model(packed), epoch,
                              checkpoint_path, 'nominal', config)
                updated, adam, grad_norm = _optimizer_step(packed, adam, flat, report.total_var, config.grad_clip)
                if updated is None:
                    _diverged(f"Nominal gradient is not finite at epoch {epoch}", current_model(packed), epoch,
                              checkpoint_path, 'nominal', config)
                packed = updated
                rows.append({**report.as_row(), 'grad_norm': grad_norm})
            row = pd.DataFrame(rows).mean().to_dict()
            row.update({'epoch': epoch + 1, 'wall_time': time.time() - started})
            history.append(row)
            update(1, loss=f"{row['total']:.4g}")
            logger.debug(f"Nominal epoch {epoch + 1}: total {row['total']:.6g}")
            if out is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, current_model(packed), 'nominal', epoch + 1, config, adam, packed,
                                run_config=run_config)

    model = current_model(packed)
    frame = pd.DataFrame(history)
    object_cd = nominal_cd_table(model, objects, config)
    logger.info(f"Nominal pretraining done; mean nominal CD(x1e3) {object_cd['nominal_cd'].mean():.4f}")
    if out is not None:
        save_checkpoint(checkpoint_path, model, 'nominal', config.epochs, config, adam, packed, run_config=run_config)
        atomic_write_csv(out / 'pretrain_log.csv', frame, seed=config.seed)
        atomic_write_csv(out / 'nominal_cd.csv', object_cd, seed=config.seed)
    return TrainResult(model, frame, config.epochs, adam, {}, object_cd)


# ---------------------------------------------------------------------------
# Phase 2: dynamics
# ---------------------------------------------------------------------------

def _windows(trajectories: Sequence[Any], horizon: int) -> List[Tuple[int, int]]:
    windows = []
    for index, trajectory in enumerate(trajectories):
        windows.extend((index, start) for start in range(len(trajectory) - horizon))
    return windows


def fit_stats(trajectories: Sequence[Any]) -> NormalizationStats:
    transitions = [tr for trajectory in trajectories for tr in trajectory.transitions]
    if not transitions:
        return NormalizationStats()
    return NormalizationStats.fit(np.stack([tr.wrench for tr in transitions]),
                                  np.stack([tr.pose for tr in transitions]),
                                  np.stack([tr.action for tr in transitions]))


def _dynamics_model(pretrained: ImplicitDeformModel, config: TrainConfig,
                    stats: NormalizationStats) -> ImplicitDeformModel:
    fresh = ImplicitDeformModel.initialize(replace(pretrained.config, ablation=config.ablation), config.seed)
    return fresh.with_params(object_hyper=pretrained.object_hyper, codes=pretrained.codes, stats=stats)


def train_dynamics(dataset, pretrained: ImplicitDeformModel, config: TrainConfig,
                   out_dir: Optional[Union[str, Path]] = None, resume: Optional[Union[str, Path]] = None,
                   monitor: Optional[PerformanceMonitor] = None,
                   run_config: Optional[Dict[str, Any]] = None) -> TrainResult:
    """Fit Ψ_d, F, A and the per-trajectory c_0 table on stride-1 horizon windows"""
    weights = config.weights
    horizon = weights.horizon
    trajectories = sorted(dataset.trajectories_in('train'), key=lambda t: t.trajectory_id)
    usable = [t for t in trajectories if len(t) > horizon]
    if len(usable) < len(trajectories):
        logger.warning(f"{len(trajectories) - len(usable)} training trajectories are shorter than "
                       f"horizon {horizon} + 1 and are skipped")
    if not usable:
        raise DataError(f"Dynamics training needs trajectories with more than {horizon} transitions")
    missing = sorted({t.object_id for t in usable} - set(pretrained.codes))
    if missing:
        raise ConfigurationError(f"Pretrained model has no code for objects {missing}")
    out = Path(out_dir) if out_dir is not None else None
    checkpoint_path = out / f"dynamics-{config.ablation}.ckpt" if out is not None else None
    monitor = monitor or PerformanceMonitor(show_progress=False)

    start_epoch = 0
    c0_rng = np.random.default_rng([config.seed, C0_STREAM])
    c0 = {t.trajectory_id: c0_rng.normal(0.0, config.c0_init_std, pretrained.config.contact_dim) for t in usable}
    if resume is not None:
        ckpt = load_checkpoint(resume, replace(pretrained.config, ablation=config.ablation))
        if ckpt.phase != 'dynamics':
            raise ConfigurationError(f"Cannot resume dynamics training from a '{ckpt.phase}' checkpoint")
        model, start_epoch = ckpt.model, ckpt.epoch
        if 'c0' in ckpt.extras:
            c0 = {name.split('.', 1)[1]: ckpt.extras['c0'].view(name).copy() for name, _ in ckpt.extras['c0'].layout}
        logger.info(f"Resuming dynamics training from epoch {start_epoch}")
    else:
        model = _dynamics_model(pretrained, config, fit_stats(usable))

    parts_init: Dict[str, np.ndarray] = {}
    if not model.config.rigid:
        parts_init['deform_hyper'] = model.deform_hyper.values
    parts_init.update({'force': model.force.values, 'action': model.action.values})
    parts_init.update({f"c0.{tid}": value for tid, value in c0.items()})
    packed = _pack(parts_init)
    adam = AdamState.create(packed, config.lr)
    if resume is not None and ckpt.adam is not None:
        adam = replace(ckpt.adam, lr=config.lr)

    def current_model(values: ParamVector) -> ImplicitDeformModel:
        updates = {'force': model.force.replace(values.view('force')),
                   'action': model.action.replace(values.view('action'))}
        if 'deform_hyper' in values.offsets:
            updates['deform_hyper'] = model.deform_hyper.replace(values.view('deform_hyper'))
        return model.with_params(**updates)

    def c0_table(values: ParamVector) -> ParamVector:
        return values.subset([f"c0.{t.trajectory_id}" for t in usable])

    with no_grad():
        object_weights = {oid: decode_object_weights(model, constant(model.object_hyper.values),
                                                     constant(model.code(oid)))
                          for oid in sorted({t.object_id for t in usable})}
    nominal = {oid: dataset.objects[oid].nominal_cloud for oid in object_weights}
    windows = _windows(usable, horizon)
    per_epoch = config.windows_per_epoch if config.windows_per_epoch > 0 else len(windows)

    history: List[Dict[str, Any]] = []
    started = time.time()
    live = current_model(packed)
    logger.info(f"Dynamics training ({config.ablation}): {len(usable)} trajectories, {len(windows)} windows, "
                f"{len(packed):,} trainable values")
    with monitor.track_operation(f"train_dynamics_{config.ablation}",
                                 total_items=config.dynamics_epochs - start_epoch) as update:
        for epoch in range(start_epoch, config.dynamics_epochs):
            rng = np.random.default_rng([config.seed, DYNAMICS_STREAM, epoch])
            order = rng.permutation(len(windows))[:per_epoch]
            rows = []
            for index in order:
                traj_index, start = windows[index]
                trajectory = usable[traj_index]
                frames = trajectory.transitions[start:start + horizon + 1]
                alpha = live.code(trajectory.object_id)
                flat = leaf(packed.values)
                parts = _split(packed, flat)
                c0_name = f"c0.{trajectory.trajectory_id}"
                if start == 0:
                    c_start = parts[c0_name]
                else:
                    c_start = constant(unroll_contact(live, alpha, packed.view(c0_name),
                                                      trajectory.transitions, start))
                params = DynamicsVars(parts.get('deform_hyper', constant(live.deform_hyper.values)),
                                      parts['force'], parts['action'], c_start)
                samples = [tr.samples.subsample(config.surface_batch, config.query_batch, rng) for tr in frames[:-1]]
                report = loss_dynamics_total(live, alpha, nominal[trajectory.object_id], frames, weights, params,
                                             samples, object_weights[trajectory.object_id])
                if not np.isfinite(report.total):
                    _diverged(f"Dynamics loss is not finite at epoch {epoch}", live, epoch, checkpoint_path,
                              'dynamics', config, {'c0': c0_table(packed)})
                updated, adam, grad_norm = _optimizer_step(packed, adam, flat, report.total_var, config.grad_clip)
                if updated is None:
                    _diverged(f"Dynamics gradient is not finite at epoch {epoch}", live, epoch, checkpoint_path,
                              'dynamics', config, {'c0': c0_table(packed)})
                packed = updated
                live = current_model(packed)
                rows.append({**report.as_row(), 'grad_norm': grad_norm})
            row = pd.DataFrame(rows).mean().to_dict()
            row.update({'epoch': epoch + 1, 'wall_time': time.time() - started})
            history.append(row)
            update(1, loss=f"{row['total']:.4g}")
            logger.debug(f"Dynamics epoch {epoch + 1}: total {row['total']:.6g}")
            if out is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, live, 'dynamics', epoch + 1, config, adam, packed,
                                {'c0': c0_table(packed)}, run_config)

    frame = pd.DataFrame(history)
    extras = {'c0': c0_table(packed)}
    if out is not None:
        save_checkpoint(checkpoint_path, live, 'dynamics', config.dynamics_epochs, config, adam, packed, extras,
                        run_config)
        atomic_write_csv(out / f"dynamics_log-{config.ablation}.csv", frame, seed=config.seed)
    logger.info(f"Dynamics training ({config.ablation}) done; final total {frame['total'].iloc[-1]:.6g}"
                if len(frame) else "Dynamics training had no epochs left to run")
    return TrainResult(live, frame, config.dynamics_epochs, adam, extras)


# ---------------------------------------------------------------------------
# Unseen-object code inference
# ---------------------------------------------------------------------------

@dataclass
class InferredCode:
    code: np.ndarray
    cd: float
    history: pd.DataFrame


def infer_object_code(model: ImplicitDeformModel, samples: SdfSampleSet, config: TrainConfig,
                      reference_cloud: Optional[PointCloud] = None, iterations: Optional[int] = None,
                      seed: Optional[int] = None) -> InferredCode:
    """Gradient descent on a fresh α with every network weight frozen"""
    seed = config.seed if seed is None else seed
    iterations = config.infer_iterations if iterations is None else iterations
    init = np.random.default_rng([seed, INFER_STREAM]).normal(0.0, config.code_init_std, model.config.latent_dim)
    params = ParamVector(init, [('alpha', (model.config.latent_dim,))])
    adam = AdamState.create(params, config.infer_lr)
    rows = []
    for iteration in range(iterations):
        rng = np.random.default_rng([seed, INFER_STREAM, iteration])
        batch = samples.subsample(config.surface_batch, config.query_batch, rng)
        alpha = leaf(params.values)
        report = loss_nominal(model, {'unseen': batch}, config.weights, codes={'unseen': alpha})
        if not np.isfinite(report.total):
            _diverged(f"Code inference loss is not finite at iteration {iteration}", model, iteration,
                      None, 'nominal', config)
        updated, adam, _ = _optimizer_step(params, adam, alpha, report.total_var, config.grad_clip)
        if updated is None:
            _diverged(f"Code inference gradient is not finite at iteration {iteration}", model, iteration,
                      None, 'nominal', config)
        params = updated
        rows.append({'iteration': iteration + 1, **report.as_row()})

    code = params.values.copy()
    cd = float('nan')
    if reference_cloud is not None:
        rng = np.random.default_rng([seed, EVAL_STREAM])
        recon = reconstruct_surface(model, code, None, config.recon_resolution, fallback_points=config.eval_points)
        cd = chamfer_x1e3(recon.sample(config.eval_points, rng), reference_cloud.sample(config.eval_points, rng))
    logger.info(f"Inferred object code in {iterations} iterations; nominal CD(x1e3) {cd:.4f}")
    return InferredCode(code, cd, pd.DataFrame(rows))
