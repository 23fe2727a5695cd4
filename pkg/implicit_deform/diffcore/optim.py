"""
Adam optimizer over flat parameter vectors, and global-norm gradient clipping.
"""

import logging
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from ..utils.error_handler import ConfigurationError, NumericError
from .params import ParamVector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamState:
    """Moments share the parameter layout; step counts completed updates"""
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: ParamVector, lr: float = 1e-4, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> 'AdamState':
        if lr <= 0:
            raise ConfigurationError(f"Learning rate must be positive, got {lr}")
        return cls(np.zeros(len(params)), np.zeros(len(params)), 0, lr, beta1, beta2, eps)

    def as_params(self, params: ParamVector) -> Tuple[ParamVector, ParamVector]:
        """Moments packaged for checkpointing"""
        return (ParamVector(self.m, params.layout, check_finite=False),
                ParamVector(self.v, params.layout, check_finite=False))


def adam_step(state: AdamState, params: ParamVector, grads: np.ndarray) -> Tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update. Pure: inputs are not modified."""
    g = np.asarray(grads.values if isinstance(grads, ParamVector) else grads, dtype=np.float64).reshape(-1)
    if g.size != len(params) or state.m.size != len(params):
        raise ConfigurationError(f"Gradient ({g.size}) / moment ({state.m.size}) size does not match "
                                 f"parameters ({len(params)})")
    finite = np.isfinite(g)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise NumericError("Non-finite gradient", parameter=params.parameter_at(bad))

    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    bc1 = 1.0 - state.beta1 ** step
    bc2 = 1.0 - state.beta2 ** step
    update = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)

    new_params = params.replace(params.values - update)
    return new_params, replace(state, m=m, v=v, step=step)


def global_norm_clip(grads: np.ndarray, max_norm: float) -> Tuple[np.ndarray, float]:
    """Scale grads so that their joint L2 norm is at most max_norm"""
    grads = np.asarray(grads, dtype=np.float64)
    total = float(np.sqrt(np.sum(grads * grads)))
    if max_norm is None or max_norm <= 0 or total <= max_norm or not np.isfinite(total):
        return grads, total
    return grads * (max_norm / total), total
