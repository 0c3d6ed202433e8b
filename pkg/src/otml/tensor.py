"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation is a plain function registered in
:data:`REGISTRY`; :class:`Tensor` methods and operators delegate to them.
Operations executed on tensors that require gradients are appended to the
thread-local :class:`Graph`, and :func:`backward` replays that tape in
reverse.
"""

import threading
from contextlib import contextmanager

import numpy as np

from .exceptions import DimensionError, DomainError, GraphError, NumericalError

__all__ = [
    "Tensor",
    "Graph",
    "REGISTRY",
    "as_tensor",
    "backward",
    "current_graph",
    "reset_graph",
    "no_grad",
    "grad_enabled",
]

REGISTRY = {}

_local = threading.local()

# Names of ops whose adjoints are deliberately perturbed (gradcheck negative control).
_corrupted = set()


class Graph:
    """Append-only tape of executed operations.

    The tape order is a valid topological order, so backward simply walks
    it in reverse. A graph is consumed by one :func:`backward` call; the
    next recorded operation starts a new generation and every tensor from
    an older generation becomes stale.
    """

    def __init__(self):
        self.nodes = []
        self.generation = 0
        self.consumed = False

    def reset(self):
        self.nodes = []
        self.generation += 1
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def _record(self, out):
        if self.consumed:
            self.reset()
        out._graph = self
        out._generation = self.generation
        out._index = len(self.nodes)
        self.nodes.append(out)


def current_graph():
    graph = getattr(_local, "graph", None)
    if graph is None:
        graph = _local.graph = Graph()
    return graph


def reset_graph():
    """Drop the recorded tape of this thread and return the (empty) graph."""
    graph = current_graph()
    graph.reset()
    return graph


def grad_enabled():
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording anything on the graph."""
    previous = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = previous


@contextmanager
def corrupted_adjoint(*ops):
    """Scale the adjoint of the named ops by 1.5 (test hook for gradcheck)."""
    _corrupted.update(ops)
    try:
        yield
    finally:
        _corrupted.difference_update(ops)


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite value produced by '{op}'", op=op)


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation.

    Parameters
    ----------
    data : array-like
        Values; copied into a C-contiguous float64 array.
    requires_grad : bool
        Whether :func:`backward` should populate ``grad`` for this leaf.
    name : str, optional
        Label used in diagnostics and checkpoints.
    """

    __slots__ = (
        "data",
        "requires_grad",
        "grad",
        "name",
        "_parents",
        "_backward",
        "_op",
        "_graph",
        "_generation",
        "_index",
    )
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        data = np.array(data, dtype=np.float64, order="C")
        _check_finite(data, "tensor")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None
        self._graph = None
        self._generation = -1
        self._index = -1

    @classmethod
    def _wrap(cls, data, requires_grad):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._parents = ()
        out._backward = None
        out._op = None
        out._graph = None
        out._generation = -1
        out._index = -1
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._op is None

    @property
    def op(self):
        return self._op

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self.data.item()

    def detach(self):
        return Tensor._wrap(self.data, False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        extra = f", op={self._op}" if self._op else ""
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}{extra})"

    def __len__(self):
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms --------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def var(self, axis=0, ddof=1, keepdims=False):
        return variance_along_axis(self, axis=axis, ddof=ddof, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def differentiable(name):
    def decorate(fn):
        REGISTRY[name] = fn
        fn.op_name = name
        return fn

    return decorate


def _make(data, parents, backward_fn, op):
    """Wrap ``data`` as the output of ``op`` and record it when needed."""
    _check_finite(data, op)
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(np.array(data, dtype=np.float64, order="C", copy=None), needs)
    if needs:
        out._parents = parents
        out._backward = backward_fn
        out._op = op
        current_graph()._record(out)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _expand_reduced(grad, shape, axis, keepdims):
    """Re-insert reduced axes so ``grad`` broadcasts against ``shape``."""
    if axis is None:
        return np.broadcast_to(np.reshape(grad, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        grad = np.expand_dims(grad, axes)
    return np.broadcast_to(grad, shape)


def _count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    return int(np.prod([shape[a] for a in axes]))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


@differentiable("add")
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


@differentiable("sub")
def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


@differentiable("mul")
def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward, "mul")


@differentiable("div")
def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), backward, "div")


@differentiable("neg")
def neg(x):
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


@differentiable("exp")
def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)  # overflow is reported by _make as NumericalError
    return _make(out, (x,), lambda g: (g * out,), "exp")


@differentiable("log")
def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


@differentiable("sqrt")
def sqrt(x):
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(x.data)

    def backward(g):
        if np.any(out == 0):
            raise DomainError("sqrt is not differentiable at 0")
        return (g / (2.0 * out),)

    return _make(out, (x,), backward, "sqrt")


@differentiable("relu")
def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


@differentiable("max_with_scalar")
def max_with_scalar(x, c):
    """Elementwise ``max(x, c)`` for a Python scalar ``c``."""
    x = as_tensor(x)
    mask = x.data > c
    return _make(np.where(mask, x.data, float(c)), (x,), lambda g: (g * mask,), "max_with_scalar")


@differentiable("clip")
def clip(x, lo, hi):
    """Clamp into ``[lo, hi]``; the adjoint vanishes where clamping is active."""
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,), "clip")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


@differentiable("sum")
def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape
    return _make(
        np.sum(x.data, axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims),),
        "sum",
    )


@differentiable("mean")
def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape
    n = _count(shape, axis)
    return _make(
        np.mean(x.data, axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims) / n,),
        "mean",
    )


@differentiable("variance_along_axis")
def variance_along_axis(x, axis=0, ddof=1, keepdims=False):
    """Variance along one axis with ``ddof`` degrees of freedom removed."""
    x = as_tensor(x)
    n = x.shape[axis]
    if n - ddof <= 0:
        raise DimensionError(f"variance needs more than {ddof} entries along axis {axis}")
    centered = x.data - x.data.mean(axis=axis, keepdims=True)
    out = np.sum(centered * centered, axis=axis, keepdims=keepdims) / (n - ddof)
    shape = x.shape

    def backward(g):
        return (_expand_reduced(g, shape, axis, keepdims) * (2.0 / (n - ddof)) * centered,)

    return _make(out, (x,), backward, "variance_along_axis")


@differentiable("l2_norm_along_axis")
def l2_norm_along_axis(x, axis=-1, keepdims=False):
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=True))
    shape = x.shape

    def backward(g):
        if np.any(norm == 0):
            raise DomainError("l2 norm is not differentiable at the zero vector")
        return (_expand_reduced(g, shape, axis, keepdims) * xd / norm,)

    out = norm if keepdims else np.squeeze(norm, axis=axis)
    return _make(out, (x,), backward, "l2_norm_along_axis")


@differentiable("softmax")
def softmax(x, axis=-1):
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


@differentiable("logsumexp")
def logsumexp(x, axis=-1, keepdims=False):
    """``log(sum(exp(x)))`` along ``axis`` with max-subtraction."""
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = m + np.log(s)
    weights = e / s
    shape = x.shape

    def backward(g):
        return (_expand_reduced(g, shape, axis, keepdims) * weights,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (x,), backward, "logsumexp")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------


@differentiable("matmul")
def matmul(a, b):
    """Matrix product of rank >= 2 operands; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


@differentiable("transpose")
def transpose(x, axes=None):
    """Permute axes; the default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


@differentiable("reshape")
def reshape(x, shape):
    x = as_tensor(x)
    original = x.shape
    try:
        out = np.reshape(x.data, shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, (x,), lambda g: (np.reshape(g, original),), "reshape")


@differentiable("concat")
def concat(tensors, axis=0):
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


@differentiable("slice")
def getitem(x, index):
    x = as_tensor(x)
    shape = x.shape

    basic = all(
        isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis
        for i in (index if isinstance(index, tuple) else (index,))
    )

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward, "slice")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(root):
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``root``.

    Gradients accumulate into existing ``grad`` buffers. The graph is
    consumed: a second call on the same root raises :class:`GraphError`.
    """
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    graph = root._graph
    if graph is None:
        raise GraphError("root was not produced by a recorded operation")
    if graph is not current_graph():
        raise GraphError("root belongs to another thread's graph")
    if graph.consumed or root._generation != graph.generation:
        raise GraphError("stale graph: backward was already run or the graph was reset")

    pending = {id(root): np.ones_like(root.data)}
    nodes = graph.nodes
    for position in range(root._index, -1, -1):
        node = nodes[position]
        g = pending.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        corrupt = node._op in _corrupted
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if corrupt:
                pg = pg * 1.5
            if not np.all(np.isfinite(pg)):
                raise NumericalError(f"non-finite adjoint from '{node._op}'", op=node._op)
            if parent._op is None:
                parent.grad = np.array(pg, dtype=np.float64) if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                prior = pending.get(key)
                pending[key] = pg if prior is None else prior + pg
    graph.consumed = True
