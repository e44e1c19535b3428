"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation (see :mod:`clipmap.ops`) produces a new
:class:`Tensor` that remembers its parents and a rule mapping the output
gradient to parent gradients.  Node ids come from a global counter, so
creation order is a valid topological order of the graph and the tape is
simply the reachable nodes sorted by id.

Gradients accumulate additively into ``leaf.grad``; callers zero them
between optimizer steps.  A graph can be differentiated once: backward frees
the recorded rules, and a second pass over the same graph raises
:class:`~clipmap.errors.ContractError`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError

_ids = itertools.count()
_default_dtype = np.float64
_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def set_default_dtype(dtype) -> None:
    """Select element precision for newly created float tensors (float64 or float32)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ContractError(f"unsupported precision {dtype!r}; use float64 or float32")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation, frozen teachers)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind in "biuf" and arr.dtype != _default_dtype:
        arr = arr.astype(_default_dtype)
    return arr


class Tensor:
    """N-dimensional array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id", "_freed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._id = next(_ids)
        self._freed = False

    # -- construction -----------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._id = next(_ids)
        out._freed = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- array-like surface ---------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar (implemented in ops) ------------------------------
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
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    @property
    def T(self) -> "Tensor":
        from . import ops
        return ops.transpose(self)

    def reshape(self, *shape) -> "Tensor":
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


class Tape:
    """Ordered record of the operations reachable from a root node.

    ``records`` lists every non-leaf node in creation order, so each
    operation's inputs precede it.  :meth:`run` walks the list in reverse and
    visits each node exactly once.
    """

    def __init__(self, root: Tensor):
        if root._freed:
            raise ContractError("graph was already differentiated; rebuild it before calling backward again")
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            node = stack.pop()
            if node._id in seen:
                continue
            seen.add(node._id)
            nodes.append(node)
            for parent in node._parents:
                if parent._freed:
                    raise ContractError("graph was already differentiated; rebuild it before calling backward again")
                if parent._id not in seen:
                    stack.append(parent)
        nodes.sort(key=lambda n: n._id)
        self.root = root
        self.records = [n for n in nodes if n._backward is not None]
        self.leaves = [n for n in nodes if n._backward is None and n.requires_grad]

    def __len__(self) -> int:
        return len(self.records)

    def run(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {self.root._id: seed}
        for node in reversed(self.records):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg
        for leaf in self.leaves:
            g = grads.pop(leaf._id, None)
            if g is None:
                continue
            g = np.asarray(g, dtype=leaf.data.dtype)
            if g.shape != leaf.data.shape:
                g = np.broadcast_to(g, leaf.data.shape)
            if leaf.grad is None:
                leaf.grad = np.array(g, copy=True)
            else:
                leaf.grad = leaf.grad + g
        for node in self.records:
            node._backward = None
            node._parents = ()
            node._freed = True


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise ContractError("graph was already differentiated; rebuild it before calling backward again")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if loss._backward is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    Tape(loss).run(np.ones_like(loss.data))
