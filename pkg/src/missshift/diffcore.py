"""Dense linear algebra and a small define-by-run reverse-mode autodiff engine.

Every value in the graph is a 2-D float64 numpy array. A graph is built by
calling the op functions below on :class:`Node` objects; calling
:func:`backward` on a scalar (1x1) loss node fills ``.grad`` on every node
that requires a gradient.

Example
-------
>>> w = param(np.array([[1.0, 2.0]]))
>>> loss, (g,) = forward_backward(sum_all(mul(w, w)), [w])
>>> g
array([[2., 4.]])
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import ndtr

from .errors import ContractError, DivergenceError, GraphError, SingularMatrixError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_matrix(a):
    """Coerce scalars, vectors and arrays to a 2-D float64 array (vectors become rows)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise GraphError(f"expected at most 2 dimensions, got shape {a.shape}")
    return a


class Node:
    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "_backward")

    def __init__(self, value, parents=(), op="input", backward=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def param(value):
    """Leaf node that receives a gradient."""
    return Node(as_matrix(value), requires_grad=True)


def constant(value):
    """Leaf node that does not receive a gradient."""
    return Node(as_matrix(value))


def _lift(x):
    return x if isinstance(x, Node) else constant(x)


def _broadcast_shape(a, b, op):
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise GraphError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc
    if shape != a.shape and shape != b.shape:
        raise GraphError(f"{op}: only row/scalar broadcasting is supported, got {a.shape} and {b.shape}")
    return shape


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    for axis, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = Node(a.value @ b.value, (a, b), "matmul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    out._backward = backward
    return out


def add(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "add")
    out = Node(a.value + b.value, (a, b), "add")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "sub")
    out = Node(a.value - b.value, (a, b), "add")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(-_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def mul(a, b):
    """Elementwise product; either operand may be a constant array such as a 0/1 mask."""
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "mul")
    out = Node(a.value * b.value, (a, b), "elemwise-mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    out._backward = backward
    return out


def stable_sigmoid(x):
    """Logistic function split on the sign of ``x`` so that exp never overflows."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    a = _lift(a)
    s = stable_sigmoid(a.value)
    out = Node(s, (a,), "sigmoid")
    out._backward = lambda g: a._accumulate(g * s * (1.0 - s))
    return out


def relu(a):
    a = _lift(a)
    on = a.value > 0
    out = Node(np.where(on, a.value, 0.0), (a,), "relu")
    out._backward = lambda g: a._accumulate(g * on)
    return out


def gaussian_cdf(a):
    a = _lift(a)
    out = Node(ndtr(a.value), (a,), "gaussian-cdf")
    out._backward = lambda g: a._accumulate(g * _INV_SQRT_2PI * np.exp(-0.5 * a.value**2))
    return out


def slice_cols(a, start, stop):
    a = _lift(a)
    if not 0 <= start < stop <= a.shape[1]:
        raise GraphError(f"slice: bad column range [{start}, {stop}) for shape {a.shape}")
    out = Node(a.value[:, start:stop].copy(), (a,), "slice")

    def backward(g):
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        a._accumulate(full)

    out._backward = backward
    return out


def concat(nodes):
    """Concatenate along columns."""
    nodes = [_lift(n) for n in nodes]
    rows = {n.shape[0] for n in nodes}
    if len(rows) != 1:
        raise GraphError(f"concat: row counts differ {sorted(rows)}")
    out = Node(np.concatenate([n.value for n in nodes], axis=1), nodes, "concat")
    bounds = np.cumsum([0] + [n.shape[1] for n in nodes])

    def backward(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            n._accumulate(g[:, lo:hi])

    out._backward = backward
    return out


def sum_all(a):
    a = _lift(a)
    out = Node(np.array([[a.value.sum()]]), (a,), "sum")
    out._backward = lambda g: a._accumulate(np.full_like(a.value, g[0, 0]))
    return out


def mse_loss(pred, target):
    pred, target = _lift(pred), _lift(target)
    if pred.shape != target.shape:
        raise GraphError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.value - target.value
    out = Node(np.array([[np.mean(diff**2)]]), (pred, target), "mse-loss")

    def backward(g):
        scale = 2.0 * g[0, 0] / diff.size
        pred._accumulate(scale * diff)
        target._accumulate(-scale * diff)

    out._backward = backward
    return out


@dataclass
class BatchNormState:
    """Running statistics and hyperparameters of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, d, momentum=0.1, eps=1e-5):
        return cls(np.zeros((1, d)), np.ones((1, d)), momentum, eps)


def batch_norm(x, gamma, beta, state, training=True, weights=None):
    """Per-feature batch normalisation followed by the affine map ``gamma * xhat + beta``.

    ``weights`` is an optional 0/1 array shaped like ``x``; when given, the
    batch statistics of each feature use only the rows where the weight is 1
    (a feature with no such rows gets mean 0 and variance 0). Running
    statistics are updated in place during training.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    n, d = x.shape
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise GraphError(f"batchnorm: affine parameters must be (1, {d})")
    eps = state.eps
    if not training:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.value - state.running_mean) * inv_std
        out = Node(xhat * gamma.value + beta.value, (x, gamma, beta), "batchnorm")

        def backward_eval(g):
            x._accumulate(g * gamma.value * inv_std)
            gamma._accumulate((g * xhat).sum(axis=0, keepdims=True))
            beta._accumulate(g.sum(axis=0, keepdims=True))

        out._backward = backward_eval
        return out

    if n < 2:
        raise ContractError("batchnorm: training mode needs a batch of at least 2 rows")
    w = np.ones_like(x.value) if weights is None else np.asarray(weights, dtype=np.float64)
    counts = w.sum(axis=0, keepdims=True)
    safe = np.maximum(counts, 1.0)
    mean = (w * x.value).sum(axis=0, keepdims=True) / safe
    centered = x.value - mean
    var = (w * centered**2).sum(axis=0, keepdims=True) / safe
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    seen = counts > 0
    m = state.momentum
    state.running_mean = np.where(seen, (1 - m) * state.running_mean + m * mean, state.running_mean)
    state.running_var = np.where(seen, (1 - m) * state.running_var + m * var, state.running_var)

    out = Node(xhat * gamma.value + beta.value, (x, gamma, beta), "batchnorm")

    def backward(g):
        gamma._accumulate((g * xhat).sum(axis=0, keepdims=True))
        beta._accumulate(g.sum(axis=0, keepdims=True))
        if x.requires_grad:
            gh = g * gamma.value
            s1 = gh.sum(axis=0, keepdims=True)
            s2 = (gh * xhat).sum(axis=0, keepdims=True)
            x._accumulate(inv_std * (gh - (w / safe) * (s1 + xhat * s2)))

    out._backward = backward
    return out


def _topological_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss):
    """Run reverse-mode differentiation from a scalar loss node."""
    if loss.shape != (1, 1):
        raise ContractError(f"loss must be a 1x1 scalar node, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss.grad = np.ones((1, 1))
    for node in reversed(_topological_order(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def forward_backward(loss, params):
    """Backpropagate ``loss`` and return ``(loss value, gradients of params)``.

    Parameters that the loss does not depend on get a zero gradient.
    """
    backward(loss)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]
    return float(loss.value[0, 0]), grads


@dataclass
class AdamState:
    """Adam optimiser state with decoupled weight decay."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state, params, grads):
    """Update ``params`` (numpy arrays) in place and return them.

    Raises DivergenceError when any gradient is non-finite; in that case no
    parameter is modified.
    """
    if len(params) != len(grads):
        raise ContractError("adam: params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ContractError(f"adam: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def cholesky(A):
    """Lower Cholesky factor; raises SingularMatrixError if ``A`` is not PD."""
    try:
        return scipy.linalg.cholesky(np.asarray(A, dtype=np.float64), lower=True)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise SingularMatrixError(f"matrix is not positive definite: {exc}") from exc


def cho_factor(A):
    try:
        return scipy.linalg.cho_factor(np.asarray(A, dtype=np.float64), lower=True)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise SingularMatrixError(f"matrix is not positive definite: {exc}") from exc


def cholesky_solve(A, B):
    """Solve ``A X = B`` for symmetric positive definite ``A``."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"cholesky_solve: A must be square, got {A.shape}")
    B = np.asarray(B, dtype=np.float64)
    if B.shape[0] != A.shape[0]:
        raise ContractError(f"cholesky_solve: B has {B.shape[0]} rows, A is {A.shape}")
    return scipy.linalg.cho_solve(cho_factor(A), B)
