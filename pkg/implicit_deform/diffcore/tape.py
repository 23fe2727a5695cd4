"""
Array-level reverse-mode differentiation.

A Var wraps a float64 ndarray. Operations on Vars that depend on a
differentiable leaf record their parents and a vector-Jacobian product.
VJPs are themselves written with Var operations, so the backward pass can
be recorded too (create_graph=True) and differentiated again.
"""

import hashlib
import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.error_handler import ConfigurationError, InvalidTapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, 'Var']


class _GradState(threading.local):
    def __init__(self):
        self.enabled = True
        self.tapes: List['Tape'] = []


_state = _GradState()


@contextmanager
def no_grad():
    """Operations inside produce constants (no recording)"""
    previous = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


@contextmanager
def enable_grad():
    previous = _state.enabled
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = previous


def fingerprint_array(values: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(values).tobytes(), digest_size=16).hexdigest()


class Var:
    """Node of the computation graph"""

    __slots__ = ('value', 'parents', 'vjp', 'fn', 'requires_grad', 'name', '__weakref__')

    def __init__(self, value, parents: Tuple['Var', ...] = (), vjp: Optional[Callable] = None,
                 fn: Optional[Callable] = None, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.fn = fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> 'Var':
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims=False): return vsum(self, axis=axis, keepdims=keepdims)
    def mean(self, axis=None, keepdims=False): return vmean(self, axis=axis, keepdims=keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)

    def numpy(self) -> np.ndarray:
        return self.value


def as_var(x: ArrayLike) -> Var:
    return x if isinstance(x, Var) else Var(x)


def constant(x: ArrayLike) -> Var:
    """Detached copy of x (no gradient flows through)"""
    return Var(x.value if isinstance(x, Var) else x)


def leaf(value: ArrayLike, name: Optional[str] = None) -> Var:
    """Differentiable input; registered on the active tape if any"""
    node = Var(np.array(value, dtype=np.float64), requires_grad=True, name=name)
    if _state.tapes:
        _state.tapes[-1].record(node)
    return node


def _make(value: np.ndarray, parents: Sequence[Var], vjp: Callable, fn: Callable) -> Var:
    tracked = _state.enabled and any(p.requires_grad for p in parents)
    if not tracked:
        return Var(value)
    node = Var(value, tuple(parents), vjp, fn, requires_grad=True)
    if _state.tapes:
        _state.tapes[-1].record(node)
    return node


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------

def sum_to(x: Var, shape: Tuple[int, ...]) -> Var:
    """Reduce a broadcast result back to `shape`"""
    x = as_var(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x

    def fn(v):
        lead = v.ndim - len(shape)
        out = v.sum(axis=tuple(range(lead))) if lead > 0 else v
        axes = tuple(i for i, s in enumerate(shape) if s == 1 and out.shape[i] != 1)
        if axes:
            out = out.sum(axis=axes, keepdims=True)
        return out.reshape(shape)

    return _make(fn(x.value), (x,), lambda g: (broadcast_to(g, x.shape),), fn)


def broadcast_to(x: Var, shape: Tuple[int, ...]) -> Var:
    x = as_var(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x

    def fn(v):
        return np.broadcast_to(v, shape).copy()

    return _make(fn(x.value), (x,), lambda g: (sum_to(g, x.shape),), fn)


def reshape(x: Var, shape) -> Var:
    x = as_var(x)
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)

    def fn(v):
        return v.reshape(shape)

    return _make(fn(x.value), (x,), lambda g: (reshape(g, x.shape),), fn)


def transpose(x: Var) -> Var:
    x = as_var(x)
    return _make(x.value.T, (x,), lambda g: (transpose(g),), lambda v: v.T)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def scatter(g: Var, index, shape: Tuple[int, ...]) -> Var:
    """Adjoint of getitem: place g into zeros(shape) at index (accumulating repeats)"""
    g = as_var(g)
    basic = _is_basic_index(index)

    def fn(v):
        out = np.zeros(shape)
        if basic:
            out[index] += v
        else:
            np.add.at(out, index, v)
        return out

    return _make(fn(g.value), (g,), lambda gg: (getitem(gg, index),), fn)


def getitem(x: Var, index) -> Var:
    x = as_var(x)

    def fn(v):
        return np.array(v[index], dtype=np.float64)

    return _make(fn(x.value), (x,), lambda g: (scatter(g, index, x.shape),), fn)


def concat(items: Sequence[ArrayLike], axis: int = -1) -> Var:
    items = [as_var(i) for i in items]
    ax = axis % items[0].ndim
    sizes = [i.shape[ax] for i in items]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for start, stop in zip(bounds[:-1], bounds[1:]):
            index = tuple([slice(None)] * ax + [slice(int(start), int(stop))])
            grads.append(getitem(g, index))
        return tuple(grads)

    def fn(*values):
        return np.concatenate(values, axis=ax)

    return _make(fn(*[i.value for i in items]), items, vjp, fn)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)), np.add)


def sub(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape)), np.subtract)


def mul(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)), np.multiply)


def div(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)

    def vjp(g):
        ga = sum_to(div(g, b), a.shape)
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.value / b.value, (a, b), vjp, np.divide)


def neg(a: ArrayLike) -> Var:
    a = as_var(a)
    return _make(-a.value, (a,), lambda g: (neg(g),), np.negative)


def matmul(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ConfigurationError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    return _make(a.value @ b.value, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)), np.matmul)


def vsum(x: ArrayLike, axis=None, keepdims: bool = False) -> Var:
    x = as_var(x)

    def fn(v):
        return np.asarray(v.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def vjp(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % x.ndim for a in axes)
            kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
            g = reshape(g, kept)
        elif axis is None:
            g = reshape(g, (1,) * x.ndim)
        return (broadcast_to(g, x.shape),)

    return _make(fn(x.value), (x,), vjp, fn)


def vmean(x: ArrayLike, axis=None, keepdims: bool = False) -> Var:
    x = as_var(x)
    if axis is None:
        count = x.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(vsum(x, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def exp(x: ArrayLike) -> Var:
    x = as_var(x)
    out = None

    def vjp(g):
        return (mul(g, out),)

    out = _make(np.exp(x.value), (x,), vjp, np.exp)
    return out


def log(x: ArrayLike) -> Var:
    x = as_var(x)
    return _make(np.log(x.value), (x,), lambda g: (div(g, x),), np.log)


def sqrt(x: ArrayLike) -> Var:
    x = as_var(x)
    out = None

    def vjp(g):
        return (div(g, mul(out, 2.0)),)

    out = _make(np.sqrt(x.value), (x,), vjp, np.sqrt)
    return out


def sin(x: ArrayLike) -> Var:
    x = as_var(x)
    return _make(np.sin(x.value), (x,), lambda g: (mul(g, cos(x)),), np.sin)


def cos(x: ArrayLike) -> Var:
    x = as_var(x)
    return _make(np.cos(x.value), (x,), lambda g: (neg(mul(g, sin(x))),), np.cos)


def tanh(x: ArrayLike) -> Var:
    x = as_var(x)
    out = None

    def vjp(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make(np.tanh(x.value), (x,), vjp, np.tanh)
    return out


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: ArrayLike) -> Var:
    x = as_var(x)
    out = None

    def vjp(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _make(_sigmoid_np(x.value), (x,), vjp, _sigmoid_np)
    return out


def softplus(x: ArrayLike, beta: float = 1.0) -> Var:
    """(1/beta) * log(1 + exp(beta * x)), numerically stable"""
    x = as_var(x)

    def fn(v):
        return np.logaddexp(0.0, beta * v) / beta

    return _make(fn(x.value), (x,), lambda g: (mul(g, sigmoid(mul(x, beta))),), fn)


def relu(x: ArrayLike) -> Var:
    x = as_var(x)

    def fn(v):
        return np.maximum(v, 0.0)

    return _make(fn(x.value), (x,), lambda g: (mul(g, Var((x.value > 0).astype(np.float64))),), fn)


def vabs(x: ArrayLike) -> Var:
    x = as_var(x)
    return _make(np.abs(x.value), (x,), lambda g: (mul(g, Var(np.sign(x.value))),), np.abs)


def clip(x: ArrayLike, lo: float, hi: float) -> Var:
    """Clamp to [lo, hi]; zero derivative outside the open interval"""
    x = as_var(x)

    def fn(v):
        return np.clip(v, lo, hi)

    def vjp(g):
        inside = ((x.value > lo) & (x.value < hi)).astype(np.float64)
        return (mul(g, Var(inside)),)

    return _make(fn(x.value), (x,), vjp, fn)


def maximum_const(x: ArrayLike, floor: float) -> Var:
    x = as_var(x)

    def fn(v):
        return np.maximum(v, floor)

    return _make(fn(x.value), (x,), lambda g: (mul(g, Var((x.value > floor).astype(np.float64))),), fn)


def norm(x: ArrayLike, axis=None, keepdims: bool = False, eps: float = 1e-12) -> Var:
    """Euclidean norm; the zero vector gets a zero (sub)gradient"""
    x = as_var(x)

    def fn(v):
        return np.asarray(np.sqrt((v * v).sum(axis=axis, keepdims=keepdims)), dtype=np.float64)

    out = None

    def vjp(g):
        if axis is None:
            g_full = reshape(g, (1,) * x.ndim)
            n_full = reshape(out, (1,) * x.ndim)
        elif keepdims:
            g_full, n_full = g, out
        else:
            kept = tuple(1 if i == axis % x.ndim else s for i, s in enumerate(x.shape))
            g_full, n_full = reshape(g, kept), reshape(out, kept)
        return (mul(g_full, div(x, maximum_const(n_full, eps))),)

    out = _make(fn(x.value), (x,), vjp, fn)
    return out


ACTIVATION_FUNCTIONS: Dict[str, Optional[Callable]] = {
    'affine': None,
    'identity': None,
    'relu': relu,
    'softplus': softplus,
    'sine': sin,
    'tanh': tanh,
}


def activate(x: Var, activation: Optional[str], softplus_beta: float = 100.0) -> Var:
    if activation is None or activation in ('affine', 'identity'):
        return x
    if activation not in ACTIVATION_FUNCTIONS:
        raise ConfigurationError(f"Unsupported activation '{activation}'. "
                                 f"Choose from {sorted(ACTIVATION_FUNCTIONS)}")
    if activation == 'softplus':
        return softplus(x, softplus_beta)
    return ACTIVATION_FUNCTIONS[activation](x)


# ---------------------------------------------------------------------------
# Tape and gradients
# ---------------------------------------------------------------------------

class Tape:
    """Ordered record of the operations evaluated inside a `with tape:` block"""

    def __init__(self):
        self.nodes: List[Var] = []
        self.watched: List[Tuple[object, str]] = []
        self.output: Optional[Var] = None
        self.inputs: Dict[str, Var] = {}
        self.squeeze_output = False

    def __enter__(self) -> 'Tape':
        _state.tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, node: Var):
        self.nodes.append(node)

    def watch(self, params, name: Optional[str] = None) -> Var:
        """Leaf for a ParamVector; remembers its fingerprint to detect staleness"""
        self.watched.append((params, params.fingerprint()))
        node = Var(params.values.copy(), requires_grad=True, name=name or 'params')
        self.record(node)
        if name:
            self.inputs[name] = node
        return node

    def check_fresh(self):
        for params, digest in self.watched:
            if params.fingerprint() != digest:
                raise InvalidTapeError("Parameters were mutated after the tape was recorded")

    def replay(self) -> Optional[np.ndarray]:
        """Re-execute every recorded op from the recorded leaves"""
        values: Dict[int, np.ndarray] = {}
        for node in self.nodes:
            if node.fn is None or not node.parents:
                values[id(node)] = node.value
                continue
            args = [values.get(id(p), p.value) for p in node.parents]
            values[id(node)] = node.fn(*args)
        if self.output is None:
            return None
        return values.get(id(self.output), self.output.value)


def _topological_order(outputs: Sequence[Var]) -> List[Var]:
    order: List[Var] = []
    seen = set()
    stack = [(o, False) for o in outputs if o.requires_grad]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(outputs: Union[Var, Sequence[Var]], inputs: Sequence[Var],
         grad_outputs: Optional[Union[ArrayLike, Sequence[ArrayLike]]] = None,
         create_graph: bool = False) -> List[Var]:
    """Vector-Jacobian products of outputs w.r.t. inputs.

    Each graph node is visited exactly once. With create_graph the backward
    computation is recorded so the returned gradients are differentiable.
    """
    outputs = [outputs] if isinstance(outputs, Var) else list(outputs)
    if grad_outputs is None:
        grad_outputs = [np.ones_like(o.value) for o in outputs]
    elif isinstance(grad_outputs, (Var, np.ndarray, float, int)):
        grad_outputs = [grad_outputs]

    grads: Dict[int, Var] = {}
    context = enable_grad() if create_graph else no_grad()
    with context:
        for out, seed in zip(outputs, grad_outputs):
            seed = as_var(seed) if create_graph else constant(seed)
            if seed.shape != out.shape:
                raise ConfigurationError(f"Output gradient shape {seed.shape} != output shape {out.shape}")
            grads[id(out)] = add(grads[id(out)], seed) if id(out) in grads else seed

        for node in reversed(_topological_order(outputs)):
            g = grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = add(grads[key], pg) if key in grads else pg

    result = []
    for x in inputs:
        g = grads.get(id(x))
        result.append(g if g is not None else Var(np.zeros_like(x.value)))
    return result


def grad_arrays(output: Var, inputs: Sequence[Var], grad_output=None) -> List[np.ndarray]:
    return [g.value for g in grad(output, inputs, grad_output, create_graph=False)]
