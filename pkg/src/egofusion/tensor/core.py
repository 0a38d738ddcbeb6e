"""Reverse-mode differentiable array with a dynamic per-forward tape."""
from __future__ import annotations

import contextlib

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class _Config:
    dtype = np.float32
    grad_enabled = True
    check_finite = True
    deterministic = False


config = _Config()


def get_default_dtype():
    return config.dtype


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    config.dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    old = config.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        config.dtype = old


@contextlib.contextmanager
def no_grad():
    old = config.grad_enabled
    config.grad_enabled = False
    try:
        yield
    finally:
        config.grad_enabled = old


_limiter = None


def set_deterministic(flag: bool = True):
    """Pin BLAS to one thread so reductions always run in the same order."""
    global _limiter
    config.deterministic = bool(flag)
    if flag and _limiter is None:
        from threadpoolctl import threadpool_limits
        _limiter = threadpool_limits(limits=1)
    elif not flag and _limiter is not None:
        _limiter.restore_original_limits()
        _limiter = None


def is_deterministic() -> bool:
    return config.deterministic


class Tensor:
    """N-d array that records the operations producing it.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after
    :meth:`backward`. Gradients accumulate across backward calls until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.array(data, dtype=dtype or config.dtype, copy=True)
        if config.check_finite and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data, parents, backward, op):
        if config.check_finite and not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced non-finite values")
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.name = None
        t._op = op
        need = config.grad_enabled and any(p.requires_grad for p in parents)
        t.requires_grad = need
        t._parents = tuple(parents) if need else ()
        t._backward = backward if need else None
        return t

    # -- array-like surface ---------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # -- reverse mode ---------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("root does not require grad")
        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype)
                else:
                    node.grad = node.grad + g
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    # -- operators (implemented in ops) ---------------------------------------
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, p):
        return _ops().power(self, p)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __getitem__(self, idx):
        return _ops().getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    def abs(self):
        return _ops().abs(self)

    def exp(self):
        return _ops().exp(self)

    def log(self):
        return _ops().log(self)

    def sqrt(self):
        return _ops().sqrt(self)


def _toposort(root):
    order = []
    state = {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        key = id(node)
        if done:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key)
        if s == 2:
            continue
        assert s != 1, "cycle in recorded graph"
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            if state.get(id(p)) != 2:
                stack.append((p, False))
    return order


def _ops():
    from . import ops
    return ops


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Parameter(Tensor):
    """Trainable leaf tensor carrying a hierarchical name."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)
