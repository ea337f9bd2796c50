"""Dense float tensor with a dynamic reverse-mode differentiation tape.

A Tensor wraps a row-major numpy array (float32 or float64).  Operations in
:mod:`tracegas.numerics.ops` record a vector-Jacobian closure on the result
so that ``backward(loss)`` can push gradients back to every reachable leaf.
Only leaves (tensors without a creator) accumulate ``.grad``; interior
gradients live in a scratch table during the sweep, which keeps repeated
``backward`` calls additive without double-counting stale interior state.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from ..errors import ShapeError

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation / data plumbing)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float array with an optional differentiation record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def result(data: np.ndarray, parents: Tuple["Tensor", ...],
               vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> "Tensor":
        """Wrap an op output, recording the tape edge when grads are live."""
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- basic properties ------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
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
        return self._vjp is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Convenience operator sugar; heavy lifting lives in ops to keep the
    # tape logic in one place.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    ``loss`` must be scalar.  Interior gradients are kept in a scratch map;
    leaf gradients add onto any existing ``.grad`` so successive calls
    accumulate.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # Iterative topological order (graphs can be thousands of nodes deep).
    topo: list[Tensor] = []
    state: dict[int, int] = {}  # id -> 0 visiting, 1 done
    stack: list[Tensor] = [loss]
    while stack:
        node = stack[-1]
        nid = id(node)
        if state.get(nid) == 1:
            stack.pop()
            continue
        if state.get(nid) == 0:
            state[nid] = 1
            topo.append(node)
            stack.pop()
            continue
        state[nid] = 0
        for p in node._parents:
            if p.requires_grad and state.get(id(p)) is None:
                stack.append(p)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
