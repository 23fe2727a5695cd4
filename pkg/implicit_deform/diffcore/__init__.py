"""
Deterministic reverse-mode differentiation for small dense networks.
"""

from .dense import LayerSpec, backward, check_layout, dense_apply, dense_eval, layer_tensors
from .optim import AdamState, adam_step, global_norm_clip
from .params import (Layout, ParamVector, dense_layout, layout_size, load_params, save_params,
                     seeded_init, encode_params, decode_params)
from .tape import Tape, Var, constant, grad, grad_arrays, leaf, no_grad

__all__ = [
    'AdamState', 'LayerSpec', 'Layout', 'ParamVector', 'Tape', 'Var',
    'adam_step', 'backward', 'check_layout', 'constant', 'decode_params', 'dense_apply',
    'dense_eval', 'dense_layout', 'encode_params', 'global_norm_clip', 'grad', 'grad_arrays',
    'layer_tensors', 'layout_size', 'leaf', 'load_params', 'no_grad', 'save_params', 'seeded_init',
]
