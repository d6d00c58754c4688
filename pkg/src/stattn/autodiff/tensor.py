"""Dense float64 tensors with reverse-mode differentiation.

Every operation that produces a tensor from inputs requiring gradients
records its parents and a backward closure on the output.  Calling
:func:`backward` on a scalar collects the reachable nodes into a
:class:`Tape`, ordered by creation sequence, and replays it in reverse.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up."""


class NumericError(ArithmeticError):
    """Raised on NaN or otherwise unusable numeric input."""


class UsageError(ValueError):
    """Raised when an API is called outside its contract."""


_sequence = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A row-major float64 array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._seq = next(_sequence)
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        out._seq = next(_sequence)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; imported lazily to keep ops.py the single source of truth
    def __add__(self, other):
        from . import ops
        return ops.add(self, _lift(other, self))

    def __radd__(self, other):
        from . import ops
        return ops.add(_lift(other, self), self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _lift(other, self))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(_lift(other, self), self)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, float(value)))


class Tape:
    """Execution-ordered record of the graph nodes reachable from a root.

    ``nodes`` lists every reachable tensor in the order it was created,
    which is a topological order because an op output is always created
    after its inputs.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen[id(node)] = node
            stack.extend(node._parents)
        return cls(sorted(seen.values(), key=lambda t: t._seq))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def reversed(self) -> Iterable[Tensor]:
        return reversed(self.nodes)


def backward(root: Tensor, seed: np.ndarray | None = None) -> Tape:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    tape = Tape.from_root(root)
    if not root.requires_grad:
        return tape
    grads: dict[int, np.ndarray] = {
        id(root): np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=np.float64)
    }
    for node in tape.reversed():
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"gradient shape {pg.shape} does not match input shape {parent.shape}"
                )
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return tape


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)
