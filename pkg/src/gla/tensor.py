"""Dense tensors with tape-based reverse-mode differentiation.

Each op that runs while recording is enabled appends a :class:`Node` to the
graph. Nodes receive a monotonically increasing id, so creation order is a
valid topological order and ``backward`` simply walks reachable nodes by
descending id. Nodes may have several outputs (the modality softmax does).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

_node_ids = itertools.count()
_state = threading.local()


class GraphError(RuntimeError):
    """Raised when a backward pass cannot be carried out."""


class ShapeError(ValueError):
    """Raised on incompatible tensor extents; names the offending axis."""


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def no_grad():
    prev = is_recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class Node:
    __slots__ = ("id", "op", "inputs", "backward_fn", "out_shapes", "out_dtype")

    def __init__(self, op, inputs, backward_fn, out_shapes, out_dtype):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.out_shapes = out_shapes
        self.out_dtype = out_dtype

    def __repr__(self):
        return f"Node({self.op}#{self.id})"


class Tensor:
    """An n-d float array plus optional graph bookkeeping.

    Leaves created by the user carry ``requires_grad``; op outputs carry a
    reference to the node that produced them.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "out_index", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.out_index = 0
        self.name = name

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

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the ops module holds the implementations
    def __add__(self, other):
        from gla import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from gla import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from gla import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[Sequence[np.ndarray]], Sequence[Optional[np.ndarray]]]


def record(op: str, inputs: Sequence[Tensor], outputs: Sequence[np.ndarray], backward_fn: BackwardFn):
    """Wrap raw op results in tensors and, when needed, attach a graph node.

    ``backward_fn`` receives one upstream gradient per output (zeros where an
    output was unused) and returns one gradient per input (``None`` allowed
    for inputs that do not need one).
    """
    needs = is_recording() and any(t.requires_grad for t in inputs)
    outs = [Tensor(o) for o in outputs]
    if needs:
        node = Node(op, tuple(inputs), backward_fn, tuple(o.shape for o in outputs), outputs[0].dtype)
        for k, t in enumerate(outs):
            t.node = node
            t.out_index = k
            t.requires_grad = True
    return outs


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise GraphError("loss was not produced by a recorded op; nothing to differentiate")

    # collect reachable nodes
    nodes = {}
    stack = [loss.node]
    while stack:
        n = stack.pop()
        if n.id in nodes:
            continue
        nodes[n.id] = n
        for t in n.inputs:
            if t.node is not None and t.node.id not in nodes:
                stack.append(t.node)

    pending: dict[int, list] = {loss.node.id: [None] * len(loss.node.out_shapes)}
    pending[loss.node.id][loss.out_index] = np.ones_like(loss.data)

    for nid in sorted(nodes, reverse=True):
        n = nodes[nid]
        slots = pending.pop(nid, None)
        if slots is None:
            continue
        grads_out = [
            g if g is not None else np.zeros(shape, dtype=n.out_dtype)
            for g, shape in zip(slots, n.out_shapes)
        ]
        grads_in = n.backward_fn(grads_out)
        if len(grads_in) != len(n.inputs):
            raise GraphError(f"{n.op}: backward returned {len(grads_in)} grads for {len(n.inputs)} inputs")
        for t, g in zip(n.inputs, grads_in):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.shape:
                raise GraphError(f"{n.op}: gradient shape {g.shape} != input shape {t.shape}")
            if t.node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
            else:
                s = pending.setdefault(t.node.id, [None] * len(t.node.out_shapes))
                s[t.out_index] = g if s[t.out_index] is None else s[t.out_index] + g
