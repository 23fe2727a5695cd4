"""
Particle-filter state estimation over contact embeddings, and surface reconstruction.

One filter step:
- refine: e Adam steps per particle on the observed-cloud geometry loss
- weight: w = exp(-γ ||f̂ - f||)
- resample: k = round(β n) fresh draws plus n - k weighted copies
- propagate: z = F(f, c, p), (f̂, ĉ) = A(α, z, a), plus process noise

Random streams are keyed by (seed, stream, step[, particle]) so results do not
depend on how refinement is spread over worker threads.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .contact import ContactConfig, ContactLine, contact_error, detect_contact_line
from .diffcore import AdamState, ParamVector, adam_step, grad, leaf, no_grad
from .diffcore.tape import constant
from .geometry import DOMAIN_HALF, PointCloud, chamfer_x1e3
from .losses import LossWeights, geo_terms
from .model import (ImplicitDeformModel, action_predict, action_predict_batch, decode_deform_weights,
                    decode_object_weights, deformation_field, force_encode, force_encode_batch, force_encode_var,
                    object_field)
from .synthgen.dataset import encode_blob
from .utils.artifacts import atomic_write_bytes, atomic_write_csv
from .utils.error_handler import ConfigurationError, NumericError, ReconstructionError
from .utils.performance_monitor import PerformanceMonitor

logger = logging.getLogger(__name__)

INIT_STREAM = 1
RESET_STREAM = 2
RESAMPLE_STREAM = 3
NOISE_STREAM = 4
EVAL_STREAM = 5
GRID_CHUNK = 32768


@dataclass(frozen=True)
class FilterConfig:
    particles: int = 40
    gamma: float = 0.7
    refine_epochs: int = 10
    refine_lr: float = 1e-3
    beta: float = 0.25
    sigma: float = 0.01
    sigma_is_variance: bool = False
    recon_resolution: int = 40
    eval_points: int = 1024
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.particles < 1:
            raise ConfigurationError(f"Particle count must be at least 1, got {self.particles}")
        if self.gamma <= 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")
        if self.refine_epochs < 0:
            raise ConfigurationError(f"Refine epochs must be non-negative, got {self.refine_epochs}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigurationError(f"Exploration fraction must be in [0, 1], got {self.beta}")
        if self.sigma < 0:
            raise ConfigurationError(f"Process noise must be non-negative, got {self.sigma}")
        if self.refine_lr <= 0:
            raise ConfigurationError(f"Refine learning rate must be positive, got {self.refine_lr}")
        if self.recon_resolution < 2:
            raise ConfigurationError(f"Reconstruction grid needs at least 2 points per side")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'FilterConfig':
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})

    @property
    def noise_std(self) -> float:
        return float(np.sqrt(self.sigma)) if self.sigma_is_variance else float(self.sigma)


@dataclass
class ParticleSet:
    """n contact embeddings with their weights and (after propagate) wrench predictions"""
    contacts: np.ndarray
    weights: Optional[np.ndarray] = None
    wrench_pred: Optional[np.ndarray] = None
    refine_losses: Optional[np.ndarray] = None

    def __post_init__(self):
        self.contacts = np.asarray(self.contacts, dtype=np.float64)
        if self.contacts.ndim != 2 or self.contacts.shape[0] < 1:
            raise ConfigurationError(f"Particle contacts must be a non-empty (n, l_c) array, got {self.contacts.shape}")
        if self.weights is not None and np.any(np.asarray(self.weights) < 0):
            raise NumericError("Particle weights must be non-negative")

    def __len__(self) -> int:
        return self.contacts.shape[0]

    def with_contacts(self, contacts: np.ndarray, **updates) -> 'ParticleSet':
        values = {'weights': self.weights, 'wrench_pred': self.wrench_pred, 'refine_losses': None}
        values.update(updates)
        return ParticleSet(contacts, **values)


def init_particles(count: int, contact_dim: int, std: float, rng: np.random.Generator) -> ParticleSet:
    return ParticleSet(rng.normal(0.0, std, size=(count, contact_dim)))


# ---------------------------------------------------------------------------
# Filter steps
# ---------------------------------------------------------------------------

@dataclass
class _RefineContext:
    model: ImplicitDeformModel
    o_weights: Any
    alpha: Any
    deform: Any
    force: Any
    observed: Optional[np.ndarray]
    nominal: np.ndarray
    f_t: np.ndarray
    p_t: np.ndarray
    weights: LossWeights


def _refine_total(ctx: _RefineContext, c):
    z = force_encode_var(ctx.model, ctx.force, ctx.f_t, c, ctx.p_t)
    d_weights = None
    if not ctx.model.config.rigid:
        d_weights = decode_deform_weights(ctx.model, ctx.deform, ctx.alpha, z)
    terms = geo_terms(ctx.model, ctx.o_weights, d_weights, ctx.observed, ctx.nominal, None, ctx.weights, refine=True)
    total = None
    for key, value in terms.items():
        weighted = value * ctx.weights.geo_weight(key)
        total = weighted if total is None else total + weighted
    return total


def _refine_one(ctx: _RefineContext, start: np.ndarray, config: FilterConfig,
                reset_rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    params = ParamVector(start, [('c', (start.size,))])
    state = AdamState.create(params, config.refine_lr)
    losses = np.full(config.refine_epochs, np.nan)
    for epoch in range(config.refine_epochs):
        c = leaf(params.values)
        total = _refine_total(ctx, c)
        (g,) = grad(total, [c])
        if not np.isfinite(total.value) or not np.all(np.isfinite(g.value)):
            logger.warning(f"Refine loss is not finite at epoch {epoch}; resetting particle")
            return reset_rng.normal(0.0, config.noise_std, size=start.size), losses
        losses[epoch] = float(total.value)
        params, state = adam_step(state, params, g.value)
    return params.values, losses


def refine_particles(particles: ParticleSet, observation: Optional[PointCloud], f_t: np.ndarray, p_t: np.ndarray,
                     model: ImplicitDeformModel, alpha: np.ndarray, nominal_cloud: PointCloud,
                     config: FilterConfig, weights: LossWeights = LossWeights(), step: int = 0) -> ParticleSet:
    """Independent Adam descent of every particle on the refine-mode geometry loss"""
    if config.refine_epochs == 0:
        return particles.with_contacts(particles.contacts.copy(),
                                       refine_losses=np.zeros((len(particles), 0)))
    with no_grad():
        alpha_c = constant(alpha)
        o_weights = decode_object_weights(model, constant(model.object_hyper.values), alpha_c)
    ctx = _RefineContext(model, o_weights, alpha_c, constant(model.deform_hyper.values),
                         constant(model.force.values),
                         observation.points if observation is not None else None,
                         nominal_cloud.points, np.asarray(f_t), np.asarray(p_t), weights)

    def run(i: int):
        reset_rng = np.random.default_rng([config.seed, RESET_STREAM, step, i])
        return _refine_one(ctx, particles.contacts[i].copy(), config, reset_rng)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run, range(len(particles))))
    else:
        results = [run(i) for i in range(len(particles))]
    contacts = np.stack([r[0] for r in results])
    losses = np.stack([r[1] for r in results])
    return particles.with_contacts(contacts, refine_losses=losses)


def weight_particles(wrench_pred: np.ndarray, f_t: np.ndarray, gamma: float) -> np.ndarray:
    """w_i = exp(-γ ||f̂_i - f||₂)"""
    diff = np.asarray(wrench_pred, dtype=np.float64).reshape(-1, 6) - np.asarray(f_t, dtype=np.float64).reshape(6)
    return np.exp(-gamma * np.linalg.norm(diff, axis=1))


def resample(particles: ParticleSet, weights: np.ndarray, beta: float, rng: np.random.Generator,
             std: float = 0.01) -> ParticleSet:
    """k = round(β n) fresh N(0, std) draws followed by n - k categorical copies"""
    n, dim = particles.contacts.shape
    weights = np.asarray(weights, dtype=np.float64).reshape(n)
    k = int(np.floor(beta * n + 0.5))
    total = float(weights.sum())
    if not np.isfinite(total) or total <= 0.0:
        logger.warning("All particle weights are zero; resampling by full exploration")
        k = n
    fresh = rng.normal(0.0, std, size=(k, dim))
    if k == n:
        return ParticleSet(fresh)
    index = rng.choice(n, size=n - k, replace=True, p=weights / total)
    return ParticleSet(np.concatenate([fresh, particles.contacts[index]]))


def propagate(particles: ParticleSet, f_t: np.ndarray, p_t: np.ndarray, a_t: np.ndarray, alpha: np.ndarray,
              model: ImplicitDeformModel, std: float, rng: np.random.Generator) -> ParticleSet:
    """Force then action module for every particle; Gaussian noise on the predicted embeddings"""
    z = force_encode_batch(model, f_t, particles.contacts, p_t)
    wrench, contacts = action_predict_batch(model, alpha, z, a_t)
    if std > 0:
        contacts = contacts + rng.normal(0.0, std, size=contacts.shape)
    return ParticleSet(contacts, wrench_pred=wrench)


# ---------------------------------------------------------------------------
# Surface reconstruction
# ---------------------------------------------------------------------------

SdfFn = Callable[[np.ndarray], np.ndarray]
SdfGradFn = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]


def extract_surface(sdf: SdfFn, sdf_and_grad: SdfGradFn, resolution: int, iso_tol: Optional[float] = None,
                    fallback_points: int = 0) -> PointCloud:
    """Grid sampling of [-1, 1]^3, one projection step x <- x - s ∇s / |∇s|², keep |s| < iso_tol"""
    if resolution < 2:
        raise ConfigurationError(f"Reconstruction grid needs at least 2 points per side, got {resolution}")
    ticks = np.linspace(-DOMAIN_HALF, DOMAIN_HALF, resolution)
    pitch = float(ticks[1] - ticks[0])
    tol = 0.25 * pitch if iso_tol is None else float(iso_tol)
    grid = np.stack(np.meshgrid(ticks, ticks, ticks, indexing='ij'), axis=-1).reshape(-1, 3)

    values = np.concatenate([np.asarray(sdf(grid[i:i + GRID_CHUNK])).reshape(-1)
                             for i in range(0, grid.shape[0], GRID_CHUNK)])
    band = grid[np.abs(values) < pitch]
    if band.shape[0] == 0:
        if fallback_points <= 0:
            raise ReconstructionError(f"Zero level set is empty at resolution {resolution}")
        logger.warning(f"Zero level set is empty at resolution {resolution}; "
                       f"keeping the {fallback_points} grid points closest to it")
        return PointCloud(grid[np.argsort(np.abs(values))[:fallback_points]])

    s, g = sdf_and_grad(band)
    g2 = np.sum(g * g, axis=1)
    step = np.where(g2 > 1e-12, s / np.maximum(g2, 1e-12), 0.0)
    projected = band - step[:, None] * g
    projected = projected[np.all(np.isfinite(projected), axis=1)]
    if projected.shape[0] == 0:
        raise ReconstructionError("Surface projection produced no finite points")
    residual = np.abs(np.asarray(sdf(projected)).reshape(-1))
    kept = projected[residual < tol]
    if kept.shape[0] == 0:
        if fallback_points <= 0:
            raise ReconstructionError(f"No projected point within {tol:.4g} of the zero level set")
        logger.warning(f"No projected point within {tol:.4g} of the zero level set; using closest ones")
        kept = projected[np.argsort(residual)[:fallback_points]]
    logger.debug(f"Reconstructed {kept.shape[0]} surface points at resolution {resolution}")
    return PointCloud(kept)


def field_functions(model: ImplicitDeformModel, alpha: np.ndarray,
                    z: Optional[np.ndarray] = None) -> Tuple[SdfFn, SdfGradFn]:
    """Batched SDF and SDF-with-spatial-gradient closures; z=None gives the nominal shape"""
    with no_grad():
        alpha_c = constant(alpha)
        o_weights = decode_object_weights(model, constant(model.object_hyper.values), alpha_c)
        d_weights = None
        if z is not None and not model.config.rigid:
            d_weights = decode_deform_weights(model, constant(model.deform_hyper.values), alpha_c, constant(z))

    def sdf(points: np.ndarray) -> np.ndarray:
        with no_grad():
            x = constant(np.asarray(points, dtype=np.float64).reshape(-1, 3))
            return object_field(model, o_weights, x + deformation_field(model, d_weights, x)).value

    def sdf_and_grad(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = leaf(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        s = object_field(model, o_weights, x + deformation_field(model, d_weights, x))
        (g,) = grad(s, [x])
        return s.value.copy(), g.value

    return sdf, sdf_and_grad


def reconstruct_surface(model: ImplicitDeformModel, alpha: np.ndarray, z: Optional[np.ndarray] = None,
                        resolution: int = 48, iso_tol: Optional[float] = None,
                        fallback_points: int = 0) -> PointCloud:
    sdf, sdf_and_grad = field_functions(model, alpha, z)
    return extract_surface(sdf, sdf_and_grad, resolution, iso_tol, fallback_points)


def reconstruction_cd(model: ImplicitDeformModel, alpha: np.ndarray, z: Optional[np.ndarray],
                      truth: PointCloud, resolution: int, eval_points: int,
                      rng: np.random.Generator) -> Tuple[float, PointCloud]:
    """CD(×10³) between a reconstruction and a ground-truth cloud, both subsampled to eval_points"""
    recon = reconstruct_surface(model, alpha, z, resolution, fallback_points=eval_points)
    return chamfer_x1e3(recon.sample(eval_points, rng), truth.sample(eval_points, rng)), recon


# ---------------------------------------------------------------------------
# Full filter loop
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    particles: np.ndarray
    weights: np.ndarray
    estimate_index: int
    estimate: np.ndarray
    weighted_mean: np.ndarray
    predicted_wrench: np.ndarray
    predicted_contact: np.ndarray
    metrics: Dict[str, Any]
    reconstruction: Optional[PointCloud] = None
    prediction: Optional[PointCloud] = None


@dataclass
class FilterTrace:
    trajectory_id: str
    object_id: str
    split: str
    records: List[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        rows = [{'trajectory_id': self.trajectory_id, 'object_id': self.object_id, 'split': self.split,
                 **record.metrics} for record in self.records]
        return pd.DataFrame(rows, columns=METRIC_COLUMNS)

    def arrays(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for record in self.records:
            key = f"step{record.step:04d}"
            out[f"{key}.particles"] = record.particles
            out[f"{key}.weights"] = record.weights
            out[f"{key}.estimate"] = record.estimate
            out[f"{key}.weighted_mean"] = record.weighted_mean
            out[f"{key}.predicted_wrench"] = record.predicted_wrench
            out[f"{key}.predicted_contact"] = record.predicted_contact
            if record.reconstruction is not None:
                out[f"{key}.reconstruction"] = record.reconstruction.points
            if record.prediction is not None:
                out[f"{key}.prediction"] = record.prediction.points
        return out


AXES = ('fx', 'fy', 'fz', 'tx', 'ty', 'tz')
METRIC_COLUMNS = ['trajectory_id', 'object_id', 'split', 'step', 'cd_est', 'cd_pred', 'wrench_err',
                  'force_err', 'torque_err'] + [f"wrench_err_{axis}" for axis in AXES] + \
                 ['contact_truth', 'contact_est_err', 'contact_pred_err', 'max_weight', 'refine_loss_first',
                  'refine_loss_last']


def _truth_line(transition) -> Optional[ContactLine]:
    if transition.contact_line is None:
        return None
    return ContactLine(transition.contact_line, transition.contact_line)


def _wrench_metrics(predicted: Optional[np.ndarray], measured: np.ndarray) -> Dict[str, float]:
    if predicted is None:
        metrics = {'wrench_err': np.nan, 'force_err': np.nan, 'torque_err': np.nan}
        metrics.update({f"wrench_err_{axis}": np.nan for axis in AXES})
        return metrics
    diff = np.asarray(predicted) - np.asarray(measured)
    metrics = {'wrench_err': float(np.linalg.norm(diff)), 'force_err': float(np.linalg.norm(diff[:3])),
               'torque_err': float(np.linalg.norm(diff[3:]))}
    metrics.update({f"wrench_err_{axis}": float(d) for axis, d in zip(AXES, diff)})
    return metrics


def _contact_err(model, alpha, z, plane, truth, contact: ContactConfig) -> float:
    if truth is None or z is None:
        return np.nan
    error = contact_error(detect_contact_line(model, alpha, z, plane, contact), truth)
    return np.nan if error is None else error


def run_filter(model: ImplicitDeformModel, trajectory, config: FilterConfig, nominal_cloud: PointCloud,
               alpha: Optional[np.ndarray] = None, contact: ContactConfig = ContactConfig(),
               weights: LossWeights = LossWeights(), monitor: Optional[PerformanceMonitor] = None,
               keep_reconstructions: bool = True) -> FilterTrace:
    """Refine -> weight -> resample -> propagate over one trajectory.

    The estimate is the highest-weight refined particle; the prediction for
    step t comes from the action module applied to the estimate of step t-1.
    Without `alpha` the object code is looked up by the trajectory's object id.
    """
    if alpha is None:
        alpha = model.code(trajectory.object_id)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (model.config.latent_dim,):
        raise ConfigurationError(f"Object code has shape {alpha.shape}, model expects ({model.config.latent_dim},)")
    trace = FilterTrace(trajectory.trajectory_id, trajectory.object_id, trajectory.split)
    transitions = trajectory.transitions
    if not transitions:
        return trace

    monitor = monitor or PerformanceMonitor(show_progress=False)
    std = config.noise_std
    contact_dim = model.config.contact_dim
    eval_rng = np.random.default_rng([config.seed, EVAL_STREAM])
    initial = init_particles(config.particles, contact_dim, std, np.random.default_rng([config.seed, INIT_STREAM]))
    particles = propagate(initial, transitions[0].wrench, transitions[0].pose, np.zeros(6), alpha, model, std,
                          np.random.default_rng([config.seed, NOISE_STREAM, 0]))
    predicted: Optional[Tuple[np.ndarray, np.ndarray]] = None

    with monitor.track_operation(f"filter {trajectory.trajectory_id}", total_items=len(transitions)) as update:
        for t, tr in enumerate(transitions):
            metrics: Dict[str, Any] = {'step': t}
            truth = _truth_line(tr)
            z_pred = None
            prediction = None
            if predicted is not None:
                z_pred = force_encode(model, predicted[0], predicted[1], tr.pose)
                metrics['cd_pred'], prediction = reconstruction_cd(model, alpha, z_pred, tr.full_cloud,
                                                                   config.recon_resolution, config.eval_points,
                                                                   eval_rng)
            else:
                metrics['cd_pred'] = np.nan
            metrics.update(_wrench_metrics(predicted[0] if predicted is not None else None, tr.wrench))

            refined = refine_particles(particles, tr.observed, tr.wrench, tr.pose, model, alpha, nominal_cloud,
                                       config, weights, step=t)
            w = weight_particles(particles.wrench_pred, tr.wrench, config.gamma)
            best = int(np.argmax(w))
            estimate = refined.contacts[best].copy()
            weighted_mean = (w[:, None] * refined.contacts).sum(axis=0) / max(float(w.sum()), 1e-300)

            z_est = force_encode(model, tr.wrench, estimate, tr.pose)
            metrics['cd_est'], reconstruction = reconstruction_cd(model, alpha, z_est, tr.full_cloud,
                                                                  config.recon_resolution, config.eval_points,
                                                                  eval_rng)
            metrics['contact_truth'] = truth is not None
            metrics['contact_est_err'] = _contact_err(model, alpha, z_est, tr.plane, truth, contact)
            metrics['contact_pred_err'] = _contact_err(model, alpha, z_pred, tr.plane, truth, contact)
            metrics['max_weight'] = float(w.max())
            losses = refined.refine_losses
            has_losses = losses is not None and losses.shape[1] > 0
            metrics['refine_loss_first'] = float(np.nanmean(losses[:, 0])) if has_losses else np.nan
            metrics['refine_loss_last'] = float(np.nanmean(losses[:, -1])) if has_losses else np.nan

            f_next, c_next = action_predict(model, alpha, z_est, tr.action)
            predicted = (f_next, c_next)
            trace.records.append(StepRecord(t, refined.contacts, w, best, estimate, weighted_mean, f_next, c_next,
                                            metrics, reconstruction if keep_reconstructions else None,
                                            prediction if keep_reconstructions else None))

            survivors = resample(refined, w,
                                 config.beta, np.random.default_rng([config.seed, RESAMPLE_STREAM, t]), std)
            particles = propagate(survivors, tr.wrench, tr.pose, tr.action, alpha, model, std,
                                  np.random.default_rng([config.seed, NOISE_STREAM, t + 1]))
            update(1, cd_est=f"{metrics['cd_est']:.3f}")
            logger.debug(f"{trajectory.trajectory_id} step {t}: CD est {metrics['cd_est']:.4f}, "
                         f"CD pred {metrics['cd_pred']:.4f}, max weight {metrics['max_weight']:.4f}")
    return trace


def write_trace(trace: FilterTrace, directory: Union[str, Path], config_digest: Optional[str] = None,
                seed: Optional[int] = None) -> Path:
    """Per-step metrics CSV plus a binary blob of particles and reconstructions"""
    directory = Path(directory)
    csv_path = atomic_write_csv(directory / f"{trace.trajectory_id}.metrics.csv", trace.to_frame(),
                                config_digest, seed)
    arrays = trace.arrays()
    if arrays:
        atomic_write_bytes(directory / f"{trace.trajectory_id}.trace.bin", encode_blob(arrays))
    return csv_path
