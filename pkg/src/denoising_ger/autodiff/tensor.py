"""Tensor and define-by-run graph for reverse-mode differentiation.

Operations only record themselves when a :class:`Graph` is active on the
current thread and at least one input requires a gradient.  Outside a graph
every op is a plain numpy computation, which is what inference uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for errors raised by the differentiation engine."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, op: str, node_id: Optional[int] = None, where: str = "output"):
        self.op = op
        self.node_id = node_id
        self.where = where
        loc = f" at node {node_id}" if node_id is not None else ""
        super().__init__(f"{op}: non-finite {where}{loc}")


_local = threading.local()

# ops whose backward is deliberately scaled, for negative-control gradient checks
_CORRUPTED: set[str] = set()


def current_graph() -> Optional["Graph"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.parents: tuple = ()
        self.backward_fn: Optional[Callable] = None
        self.op = "leaf"
        self.node_id = -1
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_output(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result, recording it on the active graph when needed."""
    if not np.isfinite(data).all():
        graph = current_graph()
        raise NonFiniteError(op, len(graph.nodes) if graph is not None else None)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    graph = current_graph()
    if graph is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        graph.record(out)
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
        out.node_id = -1
    return out


class Graph:
    """Append-only tape of recorded nodes; creation order is a topological order.

    Use as a context manager around the forward pass, then call
    :meth:`backward` on a scalar loss.  A graph belongs to the thread that
    entered it.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Graph":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, t: Tensor) -> None:
        t.node_id = len(self.nodes)
        self.nodes.append(t)

    def backward(self, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> dict:
        """Return a map leaf tensor -> gradient array.

        With ``wrt`` given, every listed leaf appears in the map (zeros when it
        did not take part in the loss).  Leaf ``.grad`` fields are accumulated
        as a side effect.
        """
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise ShapeError("backward", loss.shape, (), detail="loss must be a 0-d scalar")
        leaf_grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad and loss.node_id >= 0 and loss.node_id < len(self.nodes) \
                and self.nodes[loss.node_id] is loss:
            node_grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
            for nid in range(loss.node_id, -1, -1):
                g = node_grads.pop(nid, None)
                if g is None:
                    continue
                node = self.nodes[nid]
                pgrads = node.backward_fn(g)
                if node.op in _CORRUPTED:
                    pgrads = tuple(None if pg is None else pg * 1.5 for pg in pgrads)
                for p, pg in zip(node.parents, pgrads):
                    if pg is None or not p.requires_grad:
                        continue
                    if p.backward_fn is not None:
                        acc = node_grads.get(p.node_id)
                        node_grads[p.node_id] = pg if acc is None else acc + pg
                    else:
                        key = id(p)
                        leaves[key] = p
                        acc = leaf_grads.get(key)
                        leaf_grads[key] = pg if acc is None else acc + pg
        elif loss.requires_grad and loss.backward_fn is None:
            leaves[id(loss)] = loss
            leaf_grads[id(loss)] = np.ones((), dtype=np.float64)

        out: dict = {}
        for key, leaf in leaves.items():
            g = leaf_grads[key]
            if g.shape != leaf.data.shape:
                g = np.broadcast_to(g, leaf.data.shape).copy()
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            out[leaf] = g
        if wrt is not None:
            for leaf in wrt:
                if leaf not in out:
                    out[leaf] = np.zeros_like(leaf.data)
        return out


class no_grad:
    """Suspend recording on this thread, e.g. for decoding inside a training step."""

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(None)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()


class corrupt_backward:
    """Context manager that scales the backward pass of the named ops by 1.5.

    Only meant as a negative control for gradient checking.
    """

    def __init__(self, *ops: str):
        self.ops = ops

    def __enter__(self):
        _CORRUPTED.update(self.ops)
        return self

    def __exit__(self, *exc):
        _CORRUPTED.difference_update(self.ops)
