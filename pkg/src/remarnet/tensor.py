"""Tensor type and reverse-mode differentiation.

A ``Tensor`` wraps a float numpy array and, when it was produced by an op, the
closure that pushes its gradient back to its parents. ``backward`` walks the
graph once in reverse topological order.
"""

from contextlib import contextmanager

import numpy as np

GROUPS = ("embedding", "rm", "fc")

_state = {"mode": "default", "kinks": None}


def compute_mode():
    return _state["mode"]


def set_compute_mode(mode):
    if mode not in ("default", "fast"):
        raise ValueError(f"unknown compute mode {mode!r}")
    _state["mode"] = mode


@contextmanager
def use_compute_mode(mode):
    """Temporarily switch between sequential ("default") and BLAS ("fast") kernels."""
    previous = compute_mode()
    set_compute_mode(mode)
    try:
        yield
    finally:
        set_compute_mode(previous)


class KinkRecorder:
    """Records (then replays) the branch choices of ReLU and max-pool ops.

    Replaying the choices made at a base point turns the network into a smooth
    function near that point, which is what finite differences need.
    """

    def __init__(self):
        self.choices = []
        self.replaying = False
        self.cursor = 0

    def record_or_replay(self, fresh):
        if not self.replaying:
            self.choices.append(fresh)
            return fresh
        choice = self.choices[self.cursor]
        self.cursor += 1
        return choice

    def replay(self):
        self.replaying = True
        self.cursor = 0


def kink_recorder():
    return _state["kinks"]


@contextmanager
def recording_kinks(recorder):
    previous = _state["kinks"]
    _state["kinks"] = recorder
    try:
        yield recorder
    finally:
        _state["kinks"] = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Trainable tensor tagged with its sub-network group."""

    __slots__ = ("group",)

    def __init__(self, data, group):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        super().__init__(np.array(data, dtype=np.float32), requires_grad=True)
        self.group = group
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def make_node(data, parents, backward_fn, op):
    """Build an op output; the backward closure is kept only if a parent needs grad."""
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward_fn if needs else None, op=op)


def accumulate(t, g):
    if not isinstance(t, Tensor) or not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root):
    """Fill ``.grad`` of every tensor that requires it with d(root)/d(tensor)."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # intermediate gradients are not needed once propagated
            node.grad = None
