"""
Networks of the implicit deformation model and their compositions.

- Object module O: hypo SDF network whose weights come from the hypernetwork Ψ_o(α)
- Deformation module D: hypo displacement network with weights Ψ_d(α, z)
- Force module F: (f, c, p) -> z
- Action module A: (α, z, a) -> (f̂, ĉ)

The Var-level functions are used by the losses; the public eval_* and
*_encode / *_predict functions take and return plain arrays.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .diffcore import (Layout, ParamVector, Var, dense_apply, dense_layout, grad, layout_size,
                       load_params, no_grad, save_params, seeded_init)
from .diffcore.tape import as_var, concat, constant, getitem, leaf, matmul, reshape
from .utils.error_handler import ConfigurationError, DataError

logger = logging.getLogger(__name__)

ABLATIONS = ('none', 'no-ct', 'rigid')
WRENCH_DIM = 6
POSE_DIM = 6
ACTION_DIM = 6
MODEL_FORMAT = 'implicit-deform-model/1'


@dataclass(frozen=True)
class ModelConfig:
    """Latent sizes, widths and activations for all five networks"""
    latent_dim: int = 8
    force_dim: int = 8
    contact_dim: int = 6
    object_hidden: Tuple[int, ...] = (64, 64)
    deform_hidden: Tuple[int, ...] = (64, 64)
    hyper_hidden: Tuple[int, ...] = (64, 64)
    force_hidden: Tuple[int, ...] = (64, 64)
    action_hidden: Tuple[int, ...] = (64, 64)
    hypo_activation: str = 'softplus'
    mlp_activation: str = 'relu'
    softplus_beta: float = 100.0
    head_scale: float = 1e-2
    ablation: str = 'none'

    def __post_init__(self):
        for name in ('object_hidden', 'deform_hidden', 'hyper_hidden', 'force_hidden', 'action_hidden'):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
            if any(w <= 0 for w in getattr(self, name)):
                raise ConfigurationError(f"ModelConfig.{name} widths must be positive")
        for name in ('latent_dim', 'force_dim', 'contact_dim'):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"ModelConfig.{name} must be positive")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"Unknown ablation '{self.ablation}', choose from {ABLATIONS}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], ablation: Optional[str] = None) -> 'ModelConfig':
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if ablation is not None:
            known['ablation'] = ablation
        return cls(**known)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    @property
    def uses_contact(self) -> bool:
        return self.ablation != 'no-ct'

    @property
    def rigid(self) -> bool:
        return self.ablation == 'rigid'

    def object_spec(self) -> List[Tuple[int, Optional[str]]]:
        return [(w, self.hypo_activation) for w in self.object_hidden] + [(1, None)]

    def deform_spec(self) -> List[Tuple[int, Optional[str]]]:
        return [(w, self.hypo_activation) for w in self.deform_hidden] + [(3, None)]

    def force_spec(self) -> List[Tuple[int, Optional[str]]]:
        return [(w, self.mlp_activation) for w in self.force_hidden] + [(self.force_dim, None)]

    def action_spec(self) -> List[Tuple[int, Optional[str]]]:
        return [(w, self.mlp_activation) for w in self.action_hidden] + [(WRENCH_DIM + self.contact_dim, None)]

    @property
    def force_input_dim(self) -> int:
        return WRENCH_DIM + POSE_DIM + (self.contact_dim if self.uses_contact else 0)

    @property
    def action_input_dim(self) -> int:
        return self.latent_dim + self.force_dim + ACTION_DIM


@dataclass(frozen=True)
class HyperNetwork:
    """ReLU trunk plus one linear head per hypo layer; heads emit that layer's (weight, bias)"""
    in_dim: int
    hidden: Tuple[int, ...]
    target_layout: Tuple[Tuple[str, Tuple[int, ...]], ...]
    activation: str = 'relu'

    @property
    def trunk_spec(self) -> List[Tuple[int, Optional[str]]]:
        return [(w, self.activation) for w in self.hidden]

    @property
    def head_sizes(self) -> List[int]:
        sizes = []
        entries = list(self.target_layout)
        for i in range(0, len(entries), 2):
            sizes.append(int(np.prod(entries[i][1])) + int(np.prod(entries[i + 1][1])))
        return sizes

    def layout(self) -> Layout:
        layout = dense_layout(self.in_dim, self.trunk_spec, prefix='trunk.')
        width = self.hidden[-1]
        for i, size in enumerate(self.head_sizes):
            layout.append((f"head{i}.weight", (size, width)))
            layout.append((f"head{i}.bias", (size,)))
        return layout

    def init(self, seed: int, head_scale: float = 1e-2, zero_last_layer: bool = False) -> ParamVector:
        """Trunk kaiming-uniform; head weights scaled down; head biases hold a standard hypo init"""
        rng = np.random.default_rng(seed)
        trunk = seeded_init(dense_layout(self.in_dim, self.trunk_spec, prefix='trunk.'), int(rng.integers(2 ** 31)))
        hypo = seeded_init(list(self.target_layout), int(rng.integers(2 ** 31)))
        hypo_values = hypo.named_arrays()
        chunks = [trunk.values]
        width = self.hidden[-1]
        entries = list(self.target_layout)
        n_heads = len(self.head_sizes)
        for i, size in enumerate(self.head_sizes):
            bound = np.sqrt(6.0 / width)
            weight = rng.uniform(-bound, bound, size=(size, width)) * head_scale
            bias = np.concatenate([hypo_values[entries[2 * i][0]].reshape(-1),
                                   hypo_values[entries[2 * i + 1][0]].reshape(-1)])
            if zero_last_layer and i == n_heads - 1:
                bias = np.zeros_like(bias)
            chunks.extend([weight.reshape(-1), bias])
        return ParamVector(np.concatenate(chunks), self.layout())

    def apply(self, params: Var, conditioning: Var) -> Var:
        """Decode a flat hypo parameter Var (ordered as target_layout) from one conditioning vector"""
        conditioning = reshape(as_var(conditioning), (1, self.in_dim))
        trunk_layout = dense_layout(self.in_dim, self.trunk_spec, prefix='trunk.')
        trunk_size = layout_size(trunk_layout)
        h = dense_apply(getitem(params, slice(0, trunk_size)), trunk_layout, self.trunk_spec, conditioning)
        width = self.hidden[-1]
        outputs = []
        start = trunk_size
        for size in self.head_sizes:
            weight = reshape(getitem(params, slice(start, start + size * width)), (size, width))
            start += size * width
            bias = getitem(params, slice(start, start + size))
            start += size
            outputs.append(reshape(matmul(h, weight.T), (size,)) + bias)
        return concat(outputs, axis=0)


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel mean/std of wrench, pose and action on the training split"""
    wrench_mean: np.ndarray = field(default_factory=lambda: np.zeros(WRENCH_DIM))
    wrench_std: np.ndarray = field(default_factory=lambda: np.ones(WRENCH_DIM))
    pose_mean: np.ndarray = field(default_factory=lambda: np.zeros(POSE_DIM))
    pose_std: np.ndarray = field(default_factory=lambda: np.ones(POSE_DIM))
    action_mean: np.ndarray = field(default_factory=lambda: np.zeros(ACTION_DIM))
    action_std: np.ndarray = field(default_factory=lambda: np.ones(ACTION_DIM))

    @staticmethod
    def _safe_std(values: np.ndarray) -> np.ndarray:
        std = values.std(axis=0)
        return np.where(std > 1e-8, std, 1.0)

    @classmethod
    def fit(cls, wrenches: np.ndarray, poses: np.ndarray, actions: np.ndarray) -> 'NormalizationStats':
        wrenches, poses, actions = (np.asarray(a, dtype=np.float64).reshape(-1, 6) for a in (wrenches, poses, actions))
        if wrenches.shape[0] == 0:
            return cls()
        return cls(wrenches.mean(axis=0), cls._safe_std(wrenches), poses.mean(axis=0), cls._safe_std(poses),
                   actions.mean(axis=0), cls._safe_std(actions))

    def to_dict(self) -> Dict[str, List[float]]:
        return {k: [float(x) for x in v] for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Dict[str, Sequence[float]]) -> 'NormalizationStats':
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in data.items()})


class ImplicitDeformModel:
    """Parameters of all networks plus per-object codes and data statistics"""

    def __init__(self, config: ModelConfig, object_hyper: ParamVector, deform_hyper: ParamVector,
                 force: ParamVector, action: ParamVector, codes: Optional[Dict[str, np.ndarray]] = None,
                 stats: Optional[NormalizationStats] = None):
        self.config = config
        self.object_hypernet = HyperNetwork(config.latent_dim, config.hyper_hidden,
                                            tuple(dense_layout(3, config.object_spec())), config.mlp_activation)
        self.deform_hypernet = HyperNetwork(config.latent_dim + config.force_dim, config.hyper_hidden,
                                            tuple(dense_layout(3, config.deform_spec())), config.mlp_activation)
        self.force_layout = dense_layout(config.force_input_dim, config.force_spec())
        self.action_layout = dense_layout(config.action_input_dim, config.action_spec())
        expected = {
            'object_hyper': (object_hyper, self.object_hypernet.layout()),
            'deform_hyper': (deform_hyper, self.deform_hypernet.layout()),
            'force': (force, self.force_layout),
            'action': (action, self.action_layout),
        }
        for name, (params, layout) in expected.items():
            if params.layout != layout:
                raise ConfigurationError(f"'{name}' parameters do not match the model configuration")
        self.object_hyper = object_hyper
        self.deform_hyper = deform_hyper
        self.force = force
        self.action = action
        self.codes: Dict[str, np.ndarray] = {k: np.asarray(v, dtype=np.float64).copy() for k, v in (codes or {}).items()}
        self.stats = stats or NormalizationStats()
        for object_id, code in self.codes.items():
            if code.shape != (config.latent_dim,):
                raise ConfigurationError(f"Object code '{object_id}' has shape {code.shape}, "
                                         f"expected ({config.latent_dim},)")

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int, object_ids: Sequence[str] = (),
                   code_std: float = 0.01) -> 'ImplicitDeformModel':
        rng = np.random.default_rng(seed)
        seeds = rng.integers(2 ** 31, size=4)
        object_hypernet = HyperNetwork(config.latent_dim, config.hyper_hidden,
                                       tuple(dense_layout(3, config.object_spec())), config.mlp_activation)
        deform_hypernet = HyperNetwork(config.latent_dim + config.force_dim, config.hyper_hidden,
                                       tuple(dense_layout(3, config.deform_spec())), config.mlp_activation)
        object_hyper = object_hypernet.init(int(seeds[0]), config.head_scale)
        deform_hyper = deform_hypernet.init(int(seeds[1]), config.head_scale, zero_last_layer=True)
        force = seeded_init(dense_layout(config.force_input_dim, config.force_spec()), int(seeds[2]))
        action = seeded_init(dense_layout(config.action_input_dim, config.action_spec()), int(seeds[3]))
        codes = {object_id: rng.normal(0.0, code_std, config.latent_dim) for object_id in object_ids}
        logger.debug(f"Initialized model with {len(object_hyper) + len(deform_hyper) + len(force) + len(action):,} "
                     f"parameters and {len(codes)} object codes")
        return cls(config, object_hyper, deform_hyper, force, action, codes)

    def code(self, object_id: str) -> np.ndarray:
        if object_id not in self.codes:
            raise ConfigurationError(f"Unknown object id '{object_id}'; known: {sorted(self.codes)}")
        return self.codes[object_id]

    def with_params(self, **updates) -> 'ImplicitDeformModel':
        """Copy with some parameter groups (or codes/stats) replaced"""
        values = {'object_hyper': self.object_hyper, 'deform_hyper': self.deform_hyper,
                  'force': self.force, 'action': self.action, 'codes': self.codes, 'stats': self.stats}
        values.update(updates)
        return ImplicitDeformModel(self.config, **values)

    # -- checkpoint ---------------------------------------------------------

    def param_groups(self) -> Dict[str, ParamVector]:
        groups = {'object_hyper': self.object_hyper, 'deform_hyper': self.deform_hyper,
                  'force': self.force, 'action': self.action}
        if self.codes:
            ids = sorted(self.codes)
            groups['codes'] = ParamVector(np.concatenate([self.codes[i] for i in ids]),
                                          [(f"alpha.{i}", (self.config.latent_dim,)) for i in ids])
        return groups

    def metadata(self) -> Dict[str, Any]:
        return {'format': MODEL_FORMAT, 'model_config': self.config.to_dict(), 'stats': self.stats.to_dict()}

    def save(self, path: Union[str, Path], extra_groups: Optional[Dict[str, ParamVector]] = None,
             extra_metadata: Optional[Dict[str, Any]] = None) -> Path:
        groups = self.param_groups()
        groups.update(extra_groups or {})
        metadata = self.metadata()
        metadata.update(extra_metadata or {})
        return save_params(path, groups, metadata)


def model_from_groups(groups: Dict[str, ParamVector], metadata: Dict[str, Any],
                      expected: Optional[ModelConfig] = None) -> ImplicitDeformModel:
    if metadata.get('format') != MODEL_FORMAT:
        raise ConfigurationError(f"Checkpoint format '{metadata.get('format')}' is not a model checkpoint")
    stored = ModelConfig.from_dict(metadata['model_config'])
    if expected is not None and expected.to_dict() != stored.to_dict():
        raise ConfigurationError(f"Checkpoint model configuration {stored.to_dict()} "
                                 f"does not match requested {expected.to_dict()}")
    codes = {}
    if 'codes' in groups:
        codes = {name.split('.', 1)[1]: groups['codes'].view(name).copy() for name, _ in groups['codes'].layout}
    missing = [g for g in ('object_hyper', 'deform_hyper', 'force', 'action') if g not in groups]
    if missing:
        raise DataError(f"Checkpoint lacks parameter groups {missing}")
    try:
        return ImplicitDeformModel(stored, groups['object_hyper'], groups['deform_hyper'], groups['force'],
                                   groups['action'], codes, NormalizationStats.from_dict(metadata['stats']))
    except KeyError as exc:
        raise DataError(f"Checkpoint metadata is missing {exc}") from exc


def load_model(path: Union[str, Path], expected: Optional[ModelConfig] = None
               ) -> Tuple[ImplicitDeformModel, Dict[str, ParamVector], Dict[str, Any]]:
    """Model plus any extra groups (optimizer moments, c0 table) and metadata"""
    groups, metadata = load_params(path)
    model = model_from_groups(groups, metadata, expected)
    extras = {k: v for k, v in groups.items() if k not in model.param_groups()}
    return model, extras, metadata


# ---------------------------------------------------------------------------
# Var-level building blocks
# ---------------------------------------------------------------------------

def decode_object_weights(model: ImplicitDeformModel, hyper: Var, alpha: Var) -> Var:
    return model.object_hypernet.apply(hyper, alpha)


def decode_deform_weights(model: ImplicitDeformModel, hyper: Var, alpha: Var, z: Var) -> Var:
    return model.deform_hypernet.apply(hyper, concat([reshape(as_var(alpha), (-1,)), reshape(as_var(z), (-1,))], 0))


def object_field(model: ImplicitDeformModel, weights: Var, x: Var) -> Var:
    """O(x) for a batch of points, shape (N,)"""
    layout = list(model.object_hypernet.target_layout)
    out = dense_apply(weights, layout, model.config.object_spec(), x, model.config.softplus_beta)
    return reshape(out, (out.shape[0],))


def deformation_field(model: ImplicitDeformModel, weights: Optional[Var], x: Var) -> Var:
    """D(x) for a batch of points, shape (N, 3); identically zero for the rigid ablation"""
    x = as_var(x)
    if model.config.rigid or weights is None:
        return constant(np.zeros(x.shape))
    layout = list(model.deform_hypernet.target_layout)
    return dense_apply(weights, layout, model.config.deform_spec(), x, model.config.softplus_beta)


def force_encode_var(model: ImplicitDeformModel, force: Var, f: np.ndarray, c: Var, p: np.ndarray) -> Var:
    stats = model.stats
    f_std = (np.asarray(f, dtype=np.float64) - stats.wrench_mean) / stats.wrench_std
    p_std = (np.asarray(p, dtype=np.float64) - stats.pose_mean) / stats.pose_std
    parts = [constant(f_std)]
    if model.config.uses_contact:
        parts.append(reshape(as_var(c), (-1,)))
    parts.append(constant(p_std))
    inputs = reshape(concat(parts, 0), (1, model.config.force_input_dim))
    out = dense_apply(force, model.force_layout, model.config.force_spec(), inputs)
    return reshape(out, (model.config.force_dim,))


def action_predict_var(model: ImplicitDeformModel, action: Var, alpha: Var, z: Var,
                       a: np.ndarray) -> Tuple[Var, Var]:
    stats = model.stats
    a_std = (np.asarray(a, dtype=np.float64) - stats.action_mean) / stats.action_std
    inputs = reshape(concat([reshape(as_var(alpha), (-1,)), reshape(as_var(z), (-1,)), constant(a_std)], 0),
                     (1, model.config.action_input_dim))
    out = reshape(dense_apply(action, model.action_layout, model.config.action_spec(), inputs), (-1,))
    wrench = getitem(out, slice(0, WRENCH_DIM)) * stats.wrench_std
    contact = getitem(out, slice(WRENCH_DIM, WRENCH_DIM + model.config.contact_dim))
    return wrench, contact


# ---------------------------------------------------------------------------
# Array-level operations
# ---------------------------------------------------------------------------

def _points(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, 3), x.ndim == 1


def decode_hypo_weights(hypernet: HyperNetwork, hyper_params: ParamVector, conditioning: np.ndarray) -> ParamVector:
    conditioning = np.asarray(conditioning, dtype=np.float64).reshape(-1)
    if conditioning.size != hypernet.in_dim:
        raise ConfigurationError(f"Conditioning has {conditioning.size} values, hypernetwork expects {hypernet.in_dim}")
    if hyper_params.layout != hypernet.layout():
        raise ConfigurationError("Hypernetwork parameters do not match its layout")
    with no_grad():
        flat = hypernet.apply(constant(hyper_params.values), constant(conditioning))
    return ParamVector(flat.value, list(hypernet.target_layout))


def eval_nominal_sdf(model: ImplicitDeformModel, alpha: np.ndarray, x: np.ndarray
                     ) -> Tuple[Union[float, np.ndarray], np.ndarray]:
    """Nominal signed distance and its spatial gradient (reverse mode w.r.t. x)"""
    points, single = _points(x)
    weights = decode_object_weights(model, constant(model.object_hyper.values), constant(alpha))
    xv = leaf(points)
    s = object_field(model, weights, xv)
    (gx,) = grad(s, [xv])
    if single:
        return float(s.value[0]), gx.value[0]
    return s.value.copy(), gx.value


def eval_deformation(model: ImplicitDeformModel, alpha: np.ndarray, z: np.ndarray, x: np.ndarray) -> np.ndarray:
    points, single = _points(x)
    with no_grad():
        weights = None
        if not model.config.rigid:
            weights = decode_deform_weights(model, constant(model.deform_hyper.values), constant(alpha), constant(z))
        delta = deformation_field(model, weights, constant(points)).value
    return delta[0] if single else delta


def eval_deformed_sdf(model: ImplicitDeformModel, alpha: np.ndarray, z: np.ndarray,
                      x: np.ndarray) -> Union[float, np.ndarray]:
    """SDF(x) = O(x + D(x))"""
    points, single = _points(x)
    delta = eval_deformation(model, alpha, z, points)
    with no_grad():
        weights = decode_object_weights(model, constant(model.object_hyper.values), constant(alpha))
        s = object_field(model, weights, constant(points + delta)).value
    return float(s[0]) if single else s


def deformed_sdf_fn(model: ImplicitDeformModel, alpha: np.ndarray, z: np.ndarray):
    """Batched x -> SDF(x) closure with decoded weights cached"""
    with no_grad():
        o_weights = decode_object_weights(model, constant(model.object_hyper.values), constant(alpha))
        d_weights = None
        if not model.config.rigid:
            d_weights = decode_deform_weights(model, constant(model.deform_hyper.values), constant(alpha), constant(z))

    def sdf(points: np.ndarray) -> np.ndarray:
        with no_grad():
            xv = constant(np.asarray(points, dtype=np.float64).reshape(-1, 3))
            moved = xv + deformation_field(model, d_weights, xv)
            return object_field(model, o_weights, moved).value

    return sdf


def force_encode(model: ImplicitDeformModel, f: np.ndarray, c: np.ndarray, p: np.ndarray) -> np.ndarray:
    with no_grad():
        return force_encode_var(model, constant(model.force.values), f, constant(c), p).value


def action_predict(model: ImplicitDeformModel, alpha: np.ndarray, z: np.ndarray,
                   a: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    with no_grad():
        wrench, contact = action_predict_var(model, constant(model.action.values), constant(alpha), constant(z), a)
    return wrench.value, contact.value


def force_encode_batch(model: ImplicitDeformModel, f: np.ndarray, contacts: np.ndarray,
                       p: np.ndarray) -> np.ndarray:
    """z for every row of `contacts` (shared wrench and pose), shape (n, force_dim)"""
    stats = model.stats
    contacts = np.asarray(contacts, dtype=np.float64).reshape(-1, model.config.contact_dim)
    n = contacts.shape[0]
    f_std = np.broadcast_to((np.asarray(f, dtype=np.float64) - stats.wrench_mean) / stats.wrench_std, (n, WRENCH_DIM))
    p_std = np.broadcast_to((np.asarray(p, dtype=np.float64) - stats.pose_mean) / stats.pose_std, (n, POSE_DIM))
    parts = [f_std, contacts, p_std] if model.config.uses_contact else [f_std, p_std]
    with no_grad():
        out = dense_apply(constant(model.force.values), model.force_layout, model.config.force_spec(),
                          constant(np.concatenate(parts, axis=1)))
    return out.value


def action_predict_batch(model: ImplicitDeformModel, alpha: np.ndarray, z: np.ndarray,
                         a: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(f̂, ĉ) for every row of `z`, shapes (n, 6) and (n, contact_dim)"""
    stats = model.stats
    z = np.asarray(z, dtype=np.float64).reshape(-1, model.config.force_dim)
    n = z.shape[0]
    a_std = (np.asarray(a, dtype=np.float64) - stats.action_mean) / stats.action_std
    inputs = np.concatenate([np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n, model.config.latent_dim)),
                             z, np.broadcast_to(a_std, (n, ACTION_DIM))], axis=1)
    with no_grad():
        out = dense_apply(constant(model.action.values), model.action_layout, model.config.action_spec(),
                          constant(inputs)).value
    return out[:, :WRENCH_DIM] * stats.wrench_std, out[:, WRENCH_DIM:WRENCH_DIM + model.config.contact_dim]
