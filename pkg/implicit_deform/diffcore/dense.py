"""
Dense feed-forward evaluation on top of the tape.

A network is a flat parameter vector with a `dense_layout` plus a layer spec
of (width, activation) pairs. `dense_apply` works on any Var holding the flat
parameters, so hypernetwork-decoded weights flow through the same code path.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..utils.error_handler import ConfigurationError, NumericError
from .params import Layout, ParamVector, dense_layout, layout_size
from .tape import Tape, Var, activate, as_var, getitem, grad, leaf, matmul, reshape, transpose

logger = logging.getLogger(__name__)

LayerSpec = Sequence[Tuple[int, Optional[str]]]


def layer_tensors(flat: Var, layout: Layout) -> List[Tuple[Var, Var]]:
    """Slice a flat parameter Var into (weight, bias) pairs following `layout`"""
    if flat.shape != (layout_size(layout),):
        raise ConfigurationError(f"Flat parameters have shape {flat.shape}, "
                                 f"layout needs ({layout_size(layout)},)")
    tensors = []
    start = 0
    pending = None
    for name, shape in layout:
        size = int(np.prod(shape))
        part = reshape(getitem(flat, slice(start, start + size)), shape)
        start += size
        if name.endswith('.weight'):
            pending = part
        else:
            tensors.append((pending, part))
            pending = None
    return tensors


def dense_apply(flat: Var, layout: Layout, layer_spec: LayerSpec, x: Var,
                softplus_beta: float = 100.0) -> Var:
    """Batched forward pass: x is (N, in), result is (N, width_last)"""
    h = as_var(x)
    for (weight, bias), (_, activation) in zip(layer_tensors(as_var(flat), layout), layer_spec):
        h = matmul(h, transpose(weight)) + bias
        h = activate(h, activation, softplus_beta)
    return h


def check_layout(params: ParamVector, in_dim: int, layer_spec: LayerSpec, prefix: str = ''):
    expected = dense_layout(in_dim, layer_spec, prefix)
    if params.layout != expected:
        raise ConfigurationError(
            f"Parameter layout does not match layer spec {list(layer_spec)} with input dim {in_dim}: "
            f"got {params.layout[:4]}..., expected {expected[:4]}..."
        )


def dense_eval(params: ParamVector, layer_spec: LayerSpec, inputs: np.ndarray,
               softplus_beta: float = 100.0) -> Tuple[np.ndarray, Tape]:
    """Evaluate the network on one input vector (or a batch of rows) and keep the tape.

    Rows of a batch never interact, so a batched tape is equivalent to one tape per sample.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    squeeze = inputs.ndim == 1
    batch = inputs.reshape(1, -1) if squeeze else inputs
    if batch.ndim != 2:
        raise ConfigurationError(f"Input must be a vector or a 2-D batch, got shape {inputs.shape}")
    if not np.all(np.isfinite(batch)):
        raise NumericError("Non-finite network input")
    check_layout(params, batch.shape[1], layer_spec)

    with Tape() as tape:
        p = tape.watch(params, 'params')
        x = leaf(batch, 'input')
        tape.inputs['input'] = x
        out = dense_apply(p, params.layout, layer_spec, x, softplus_beta)
    tape.output = out
    tape.squeeze_output = squeeze

    if not np.all(np.isfinite(out.value)):
        raise NumericError("Network produced non-finite output")
    value = out.value[0] if squeeze else out.value
    return value.copy(), tape


def backward(tape: Tape, output_grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Parameter and input gradients of <output, output_grad>"""
    tape.check_fresh()
    if tape.output is None or 'params' not in tape.inputs:
        raise ConfigurationError("Tape was not produced by dense_eval")
    seed = np.asarray(output_grad, dtype=np.float64)
    if seed.size != tape.output.value.size:
        raise ConfigurationError(f"Output gradient has {seed.size} values, output has {tape.output.value.size}")
    seed = seed.reshape(tape.output.shape)

    param_grad, input_grad = grad(tape.output, [tape.inputs['params'], tape.inputs['input']], seed)
    input_values = input_grad.value[0] if getattr(tape, 'squeeze_output', False) else input_grad.value
    return param_grad.value.copy(), input_values.copy()
