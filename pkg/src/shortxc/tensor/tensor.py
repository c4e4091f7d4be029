"""Dense tensors with reverse-mode differentiation.

Values are stored as float32 (float64 only when asked for explicitly, for
finite-difference shadow copies)
and every op accumulates in float64 before rounding back to the storage dtype.
Each op result that depends on a differentiable input records its parents and
a closure mapping the output cotangent to input cotangents. ``backward`` walks
the recorded graph in reverse topological order and frees it afterwards.
"""
from contextlib import contextmanager

import numpy as np

from ..errors import ContractError

_STORAGE = (np.float32, np.float64)
_grad_enabled = True


@contextmanager
def no_grad():
    """Build no graph inside the block (inference, power iteration, updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        dtype = np.dtype(np.float32 if dtype is None else dtype)
        if dtype not in _STORAGE:
            raise ContractError(f"tensor storage must be float32 or float64, got {dtype}")
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        if not np.all(np.isfinite(self.data)):
            raise ContractError(f"non-finite values in tensor {name or ''}".strip())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        return backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


def make_result(value, parents, backward_fn, dtype):
    """Wrap an op output; records the graph edge only when some parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(value, dtype=dtype)
    out.grad = None
    out.name = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def detach(x):
    """Same values, no path back to the producers of ``x``."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.grad = None
    out.name = x.name
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


def _topo_order(root):
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad.

    Returns the list of leaves touched. The recorded graph is released.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return []
    order = _topo_order(loss)
    cot = {id(loss): np.ones_like(loss.data, dtype=np.float64)}
    leaves = []
    for node in reversed(order):
        g = cot.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.astype(node.data.dtype, copy=False)
            leaves.append(node)
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in cot:
                cot[key] = cot[key] + pg
            else:
                cot[key] = pg
    for node in order:
        node._parents = ()
        node._backward = None
    return leaves
