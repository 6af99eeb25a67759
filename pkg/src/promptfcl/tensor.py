"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every op builds a fresh graph node when at least one input requires a
gradient. ``backward`` walks the graph once in reverse topological order
and accumulates gradients onto leaves that requested them.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_EPS = 1e-12
LAYERNORM_EPS = 1e-10

_state = threading.local()


class ShapeError(ValueError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad, out._parents, out._backward = True, tuple(parents), backward
    else:
        out.requires_grad, out._parents, out._backward = False, (), None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)
    return _make(a.data + b.data, (a, b), "add", bw)


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("subtract", a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)
    return _make(a.data - b.data, (a, b), "subtract", bw)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("multiply", a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _make(a.data * b.data, (a, b), "multiply", bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    if b.ndim == 2 and a.ndim > 2:
        # (..., k) @ (k, n): fold the batch dims into one BLAS call
        k, n = b.shape
        a2 = a.data.reshape(-1, k)

        def bw(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb
        return _make((a2 @ b.data).reshape(a.shape[:-1] + (n,)), (a, b), "matmul", bw)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return _make(a.data @ b.data, (a, b), "matmul", bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(i != ax and n != m for i, (n, m) in enumerate(zip(t.shape, ref))):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _make(y, (a,), "softmax", bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return _make(out, (a,), "log_softmax", bw)


def layer_norm(a, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)
    return _make(xhat, (a,), "layer_norm", bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), "sum", bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)
    return _make(out, (a,), "mean", bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for shape {a.shape}")
    inverse = np.argsort([ax % a.ndim for ax in axes])
    return _make(np.transpose(a.data, axes), (a,), "transpose",
                 lambda g: (np.transpose(g, inverse),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    basic = _is_basic(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, index, g)
        return (full,)
    return _make(np.array(out), (a,), "getitem", bw)


def cosine_similarity(u, v, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Cosine similarity along ``axis`` with broadcasting.

    Where either norm is below ``eps`` the result is 0 and no gradient flows.
    """
    u, v = as_tensor(u), as_tensor(v)
    _check_broadcast("cosine_similarity", u, v)
    ud, vd = np.broadcast_arrays(u.data, v.data)
    nu = np.sqrt((ud * ud).sum(axis=axis, keepdims=True))
    nv = np.sqrt((vd * vd).sum(axis=axis, keepdims=True))
    ok = (nu >= eps) & (nv >= eps)
    nu_s = np.where(ok, nu, 1.0)
    nv_s = np.where(ok, nv, 1.0)
    dot = (ud * vd).sum(axis=axis, keepdims=True)
    cos = np.where(ok, dot / (nu_s * nv_s), 0.0)
    out = np.squeeze(cos, axis=axis)

    def bw(g):
        g = np.expand_dims(g, axis) * ok
        gu = g * (vd / (nu_s * nv_s) - cos * ud / (nu_s * nu_s))
        gv = g * (ud / (nu_s * nv_s) - cos * vd / (nv_s * nv_s))
        return _unbroadcast(gu, u.shape), _unbroadcast(gv, v.shape)
    return _make(out, (u, v), "cosine_similarity", bw)


def l2_distance(a, b) -> Tensor:
    """Frobenius norm of ``a - b`` as a scalar; zero subgradient at a == b."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l2_distance: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    peak = float(np.abs(diff).max()) if diff.size else 0.0
    # rescale before squaring so tiny differences do not underflow to zero
    d = peak * float(np.sqrt(((diff / peak) ** 2).sum())) if peak > 0 else 0.0

    def bw(g):
        if d == 0.0:
            z = np.zeros_like(diff)
            return z, z.copy()
        ga = g * diff / d
        return ga, -ga
    return _make(d, (a, b), "l2_distance", bw)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "scale": scale,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "relu": relu,
    "sum": tsum,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "getitem": getitem,
    "cosine_similarity": cosine_similarity,
    "l2_distance": l2_distance,
}


def forward_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves listed in ``inputs`` that the loss does not reach get a zero grad.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if inputs is not None:
        for t in inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --------------------------------------------------------------------- adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` and returns the new parameter."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not (param.shape == grad.shape == state.m.shape == state.v.shape):
        raise ShapeError(f"adam_step: shapes differ {param.shape}, {grad.shape}, {state.m.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class Adam:
    params: list
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        for p in self.params:
            self.states[id(p)] = AdamState.zeros_like(
                p.data, beta1=self.betas[0], beta2=self.betas[1], eps=self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data = adam_step(p.data, g, self.states[id(p)], self.lr)
