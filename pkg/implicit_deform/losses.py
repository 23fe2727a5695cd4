"""
Training objectives: nominal pretraining, geometry loss, and the horizon dynamics loss.

Reductions are means over the sample rows inside each term; terms are summed
over objects (nominal) or over horizon steps (dynamics).
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diffcore import Var, grad
from .diffcore.tape import as_var, clip, constant, maximum_const, norm, reshape, vabs, vmean, vsum, no_grad
from .geometry import PointCloud, SdfSampleSet, chamfer_var, nearest_neighbors
from .model import (ImplicitDeformModel, action_predict_var, decode_deform_weights, decode_object_weights,
                    deformation_field, force_encode_var, object_field)
from .utils.error_handler import BoundsError, ConfigurationError, DataError

logger = logging.getLogger(__name__)

GEO_TERMS = ('min_correction', 'correspondence', 'normal', 'sdf')


@dataclass(frozen=True)
class LossWeights:
    lam: float = 5e1
    lam1: float = 1e1
    lam2: float = 1e1
    lam3: float = 1e4
    lam4: float = 1.0
    lam5: float = 1e2
    lam6: float = 1e5
    lam7: float = 5e1
    lam8: float = 3e6
    lam9: float = 1e1
    lam10: float = 1e1
    lam11: float = 1e1
    delta: float = 0.1
    horizon: int = 3

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigurationError(f"Loss weight {name} must be non-negative, got {value}")
        if self.delta <= 0:
            raise ConfigurationError(f"Clamp delta must be positive, got {self.delta}")
        if self.horizon < 1:
            raise ConfigurationError(f"Horizon must be at least 1, got {self.horizon}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LossWeights':
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def geo_weight(self, term: str) -> float:
        return {'min_correction': self.lam5, 'correspondence': self.lam6,
                'normal': self.lam7, 'sdf': self.lam8}[term]


@dataclass
class LossReport:
    """Raw terms, their weighted contributions and the differentiable total"""
    terms: Dict[str, float]
    weighted: Dict[str, float]
    total: float
    total_var: Optional[Var] = None
    trace: List[Dict[str, np.ndarray]] = field(default_factory=list)

    def as_row(self) -> Dict[str, float]:
        row = {f"loss_{k}": v for k, v in self.terms.items()}
        row['total'] = self.total
        return row


def _report(raw: Dict[str, Var], weights: Dict[str, float], trace=None) -> LossReport:
    weighted_vars = {k: raw[k] * weights[k] for k in raw}
    total_var = None
    for key in raw:
        total_var = weighted_vars[key] if total_var is None else total_var + weighted_vars[key]
    if total_var is None:
        total_var = constant(0.0)
    weighted = {k: float(v.value) for k, v in weighted_vars.items()}
    return LossReport(terms={k: float(v.value) for k, v in raw.items()}, weighted=weighted,
                      total=float(total_var.value), total_var=total_var, trace=trace or [])


def clamp_sd(s, delta: float):
    """Clip signed distances to [-delta, delta] (works on arrays and Vars)"""
    if delta <= 0:
        raise ConfigurationError(f"Clamp delta must be positive, got {delta}")
    if isinstance(s, Var):
        return clip(s, -delta, delta)
    out = np.clip(np.asarray(s, dtype=np.float64), -delta, delta)
    return float(out) if out.ndim == 0 else out


def _unit_rows(g: Var) -> Var:
    return g / maximum_const(norm(g, axis=1, keepdims=True), 1e-12)


def normal_alignment(pred_grad: Var, target_normals: np.ndarray) -> Var:
    """mean(1 - <normalized grad, n*>); each row lies in [0, 2]"""
    target = np.asarray(target_normals, dtype=np.float64).reshape(-1, 3)
    if target.shape[0] == 0:
        return constant(0.0)
    cosine = vsum(_unit_rows(as_var(pred_grad)) * target, axis=1)
    return vmean(1.0 - cosine)


def sdf_regression(pred_sd: Var, target_sd: np.ndarray, delta: float) -> Var:
    return vmean(vabs(clamp_sd(as_var(pred_sd), delta) - np.clip(target_sd, -delta, delta)))


def _check_normals(samples: SdfSampleSet, owner: str):
    expected = int(samples.surface_mask.sum())
    normals = samples.target_normals
    if normals is None or normals.shape != (expected, 3) or not np.all(np.isfinite(normals)):
        raise DataError(f"Samples for '{owner}' are missing normals on their {expected} surface rows")


# ---------------------------------------------------------------------------
# Nominal pretraining
# ---------------------------------------------------------------------------

def nominal_terms(pred_sd, target_sd, pred_grad, target_normals, alpha, hypo_weights,
                  weights: LossWeights) -> Dict[str, Var]:
    """Per-object nominal terms; accepts arrays (for oracles) or Vars (for training)"""
    return {
        'sdf': sdf_regression(as_var(pred_sd), np.asarray(target_sd), weights.delta),
        'normal': normal_alignment(as_var(pred_grad), target_normals),
        'latent': norm(as_var(alpha)),
        'hyper': norm(as_var(hypo_weights)),
    }


def nominal_weights(weights: LossWeights) -> Dict[str, float]:
    return {'sdf': 1.0, 'normal': weights.lam, 'latent': weights.lam1, 'hyper': weights.lam2}


def loss_nominal(model: ImplicitDeformModel, samples: Dict[str, SdfSampleSet], weights: LossWeights,
                 object_hyper: Optional[Var] = None, codes: Optional[Dict[str, Var]] = None) -> LossReport:
    """L_sdf + λ1 L_latent + λ2 L_hyper summed over objects.

    Pass Vars for object_hyper / codes to get a total differentiable in them.
    """
    if not samples:
        raise DataError("Nominal loss needs at least one object with samples")
    hyper = object_hyper if object_hyper is not None else constant(model.object_hyper.values)
    summed: Dict[str, Var] = {}
    for object_id in sorted(samples):
        sample_set = samples[object_id]
        _check_normals(sample_set, object_id)
        alpha = codes[object_id] if codes is not None else constant(model.code(object_id))
        hypo = decode_object_weights(model, hyper, alpha)
        x = Var(sample_set.queries, requires_grad=True)
        s = object_field(model, hypo, x)
        (gx,) = grad(s, [x], create_graph=True)
        surface_grad = gx[np.flatnonzero(sample_set.surface_mask)]
        terms = nominal_terms(s, sample_set.target_sd, surface_grad, sample_set.target_normals, alpha, hypo, weights)
        for key, value in terms.items():
            summed[key] = value if key not in summed else summed[key] + value
    return _report(summed, nominal_weights(weights))


# ---------------------------------------------------------------------------
# Geometry loss
# ---------------------------------------------------------------------------

def one_sided_chamfer_var(pred: Var, target: np.ndarray) -> Var:
    index, _ = nearest_neighbors(pred.value, target)
    diff = pred - np.asarray(target)[index]
    return vmean(vsum(diff * diff, axis=1))


def geo_terms(model: ImplicitDeformModel, o_weights: Var, d_weights: Optional[Var],
              observed: Optional[np.ndarray], nominal_gt: np.ndarray,
              samples: Optional[SdfSampleSet], weights: LossWeights, refine: bool = False) -> Dict[str, Var]:
    """Minimum correction, correspondence, normal alignment and SD regression.

    Training mode uses the sample set (Ω, Ω₀, s*, n*) and the full surface rows as P.
    Refine mode uses only the observed cloud: s* = 0 at observed points,
    one-sided correspondence to the nominal cloud, no normal term. With no
    observation and no samples only the minimum correction over the nominal
    cloud points remains.
    """
    nominal_gt = np.asarray(nominal_gt, dtype=np.float64).reshape(-1, 3)
    if nominal_gt.shape[0] == 0:
        raise DataError("Geometry loss needs a non-empty nominal cloud")
    has_observation = observed is not None and np.asarray(observed).size > 0

    if refine or samples is None:
        if not has_observation:
            x = constant(nominal_gt)
            return {'min_correction': vmean(norm(deformation_field(model, d_weights, x), axis=1))}
        x = constant(np.asarray(observed, dtype=np.float64).reshape(-1, 3))
        moved = x + deformation_field(model, d_weights, x)
        delta = moved - x
        s = object_field(model, o_weights, moved)
        return {
            'min_correction': vmean(norm(delta, axis=1)),
            'correspondence': one_sided_chamfer_var(moved, nominal_gt),
            'sdf': sdf_regression(s, np.zeros(s.shape[0]), weights.delta),
        }

    _check_normals(samples, 'deformed frame')
    x = Var(samples.queries, requires_grad=True)
    delta = deformation_field(model, d_weights, x)
    moved = x + delta
    s = object_field(model, o_weights, moved)
    surface_rows = np.flatnonzero(samples.surface_mask)
    terms = {'min_correction': vmean(norm(delta, axis=1))}
    if surface_rows.size:
        terms['correspondence'] = chamfer_var(moved[surface_rows], nominal_gt)
        (gx,) = grad(s, [x], create_graph=True)
        terms['normal'] = normal_alignment(gx[surface_rows], samples.target_normals)
    terms['sdf'] = sdf_regression(s, samples.target_sd, weights.delta)
    return terms


def loss_geo(model: ImplicitDeformModel, alpha: np.ndarray, z, observed: Optional[PointCloud],
             nominal_gt: PointCloud, samples: Optional[SdfSampleSet], weights: LossWeights,
             deform_hyper: Optional[Var] = None, refine: bool = False) -> LossReport:
    """Geometry loss for one frame. `z` may be a Var to differentiate through the force code."""
    o_weights = decode_object_weights(model, constant(model.object_hyper.values), constant(alpha))
    d_weights = None
    if not model.config.rigid:
        hyper = deform_hyper if deform_hyper is not None else constant(model.deform_hyper.values)
        d_weights = decode_deform_weights(model, hyper, constant(alpha), as_var(z))
    observed_points = observed.points if observed is not None else None
    raw = geo_terms(model, o_weights, d_weights, observed_points, nominal_gt.points, samples, weights, refine)
    return _report(raw, {k: weights.geo_weight(k) for k in raw})


# ---------------------------------------------------------------------------
# Horizon dynamics loss
# ---------------------------------------------------------------------------

@dataclass
class DynamicsVars:
    """Differentiable handles for the parameters trained in the dynamics phase"""
    deform_hyper: Var
    force: Var
    action: Var
    c_start: Var


def loss_dynamics_total(model: ImplicitDeformModel, alpha: np.ndarray, nominal_gt: PointCloud,
                        transitions: Sequence[Any], weights: LossWeights, params: DynamicsVars,
                        samples: Optional[Sequence[SdfSampleSet]] = None,
                        object_weights: Optional[Var] = None) -> LossReport:
    """Σ_t (L_geo_t + λ3 L_pred_t + λ4 L_reg_t) over a window of horizon w.

    `transitions` must hold w + 1 consecutive frames; frame t uses the measured
    wrench f_t and the contact embedding recursively predicted from frame t-1.
    """
    w = weights.horizon
    if len(transitions) < w + 1:
        raise BoundsError(f"Horizon {w} needs {w + 1} transitions, window has {len(transitions)}")
    frame_samples = samples if samples is not None else [tr.samples for tr in transitions]
    alpha_c = constant(alpha)
    o_weights = object_weights if object_weights is not None else \
        decode_object_weights(model, constant(model.object_hyper.values), alpha_c)

    summed: Dict[str, Var] = {}
    trace: List[Dict[str, np.ndarray]] = []
    c = params.c_start

    def accumulate(key: str, value: Var):
        summed[key] = value if key not in summed else summed[key] + value

    for t in range(w):
        current, following = transitions[t], transitions[t + 1]
        z = force_encode_var(model, params.force, current.wrench, c, current.pose)
        d_weights = None
        if not model.config.rigid:
            d_weights = decode_deform_weights(model, params.deform_hyper, alpha_c, z)
        observed = current.observed.points if current.observed is not None else None
        geo = geo_terms(model, o_weights, d_weights, observed, nominal_gt.points, frame_samples[t], weights)
        for key, value in geo.items():
            accumulate(key, value)

        f_next, c_next = action_predict_var(model, params.action, alpha_c, z, current.action)
        accumulate('pred', norm(f_next - np.asarray(following.wrench, dtype=np.float64)))
        reg = norm(z) * weights.lam9 + norm(c) * weights.lam10
        if d_weights is not None:
            reg = reg + norm(d_weights) * weights.lam11
        accumulate('reg', reg)

        trace.append({'c_in': c.value.copy(), 'z': z.value.copy(),
                      'f_pred': f_next.value.copy(), 'c_pred': c_next.value.copy()})
        c = c_next

    term_weights = {k: weights.geo_weight(k) for k in GEO_TERMS}
    term_weights.update({'pred': weights.lam3, 'reg': weights.lam4})
    return _report(summed, term_weights, trace)


def unroll_contact(model: ImplicitDeformModel, alpha: np.ndarray, c0: np.ndarray,
                   transitions: Sequence[Any], steps: int) -> np.ndarray:
    """Contact embedding after `steps` recursive force/action predictions (no gradient)"""
    c = np.asarray(c0, dtype=np.float64)
    with no_grad():
        force, action = constant(model.force.values), constant(model.action.values)
        for t in range(steps):
            tr = transitions[t]
            z = force_encode_var(model, force, tr.wrench, constant(c), tr.pose)
            _, c_next = action_predict_var(model, action, constant(alpha), z, tr.action)
            c = c_next.value
    return c
