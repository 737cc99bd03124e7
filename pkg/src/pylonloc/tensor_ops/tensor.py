"""Minimal reverse-mode autograd over numpy arrays.

Every differentiable operation in :mod:`pylonloc.tensor_ops.functional` returns a
:class:`Tensor` that remembers its parents and a closure mapping the output
gradient to parent gradients. Calling :meth:`Tensor.backward` on a scalar walks
that tape in reverse topological order.

The tape also doubles as a graph description: ``Tensor.op`` names the operation
that produced a value, which lets models be inspected (e.g. counting
``global_avg_pool`` nodes) without a separate IR.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording of backward closures inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: Sequence["Tensor"] = (),
        backward: Optional[BackwardFn] = None,
        name: Optional[str] = None,
    ):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        from .functional import add

        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from .functional import mul

        return mul(self, other)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._backward is None:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list:
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
        for parent in node.parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def iter_graph(root: Tensor) -> Iterator[Tensor]:
    """Yield every node reachable from ``root`` once, regardless of ``requires_grad``."""
    seen = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        yield node
        stack.extend(node.parents)


def count_ops(root: Tensor, op: str) -> int:
    return sum(1 for node in iter_graph(root) if node.op == op)


class Param(Tensor):
    """A named trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, value, name: str):
        super().__init__(np.array(value), requires_grad=True, op="param", name=name)
        self.zero_grad()

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap an op result; drop the closure when nothing upstream needs gradients."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=needs,
        op=op,
        parents=parents,
        backward=backward if needs else None,
    )
