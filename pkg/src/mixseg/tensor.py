"""A small reverse-mode autodiff tensor.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a node (the parent tensors plus a closure mapping the
output gradient to parent gradients); :meth:`Tensor.backward` walks these
nodes in reverse topological order.

Training runs in float32. Any float64 input stays float64 through every
operation, which is how the gradient oracle gets its headroom.
"""

import contextlib

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float32


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for non-float inputs."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def _as_array(data, dtype=None):
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(_DEFAULT_DTYPE)
    return arr


class Tensor:
    """n-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_freed", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._freed = False
        self.name = name

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autodiff ---------------------------------------------------------

    def backward(self, retain_graph=False):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf.

        ``self`` must be a scalar. The graph is released afterwards unless
        ``retain_graph`` is set; a second call then requires a new forward.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar, got shape {self.shape}")
        if self._freed:
            raise ContractError("graph was freed by an earlier backward(); pass retain_graph=True")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad and g is not None:
                    if node.grad is None:
                        node.grad = g.copy()
                    else:
                        node.grad += g
                continue
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if not retain_graph:
            for node in order:
                if node._backward is not None:
                    node._parents = ()
                    node._backward = None
                    node._freed = True

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def sum(self):
        return tensor_sum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root):
    """Nodes reachable from ``root``, consumers before producers."""
    order = []
    seen = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def make_result(data, parents, backward):
    """Wrap ``data`` as the output of an operation.

    ``backward(g)`` must return one gradient (or ``None``) per parent. The
    node is only recorded when grad mode is on and a parent needs it, so
    custom operations can be written outside this module with this helper.
    """
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(data.astype(a.dtype, copy=False), (a, b), backward)


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(data.astype(a.dtype, copy=False), (a, b), backward)


def tensor_sum(a):
    data = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return make_result(data, (a,), backward)


def reshape(a, shape):
    data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return make_result(data, (a,), backward)


def take_rows(a, start, stop):
    """``a[start:stop]`` along the first axis."""
    data = a.data[start:stop]

    def backward(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[start:stop] = g
        return (full,)

    return make_result(data, (a,), backward)
