"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op in :mod:`avsync.ops` records a node on the innermost
active :class:`Tape`.  ``Tape.backward`` replays the nodes in reverse
execution order, which is a valid reverse topological order because a node's
inputs always exist before the node is recorded.

    >>> with Tape() as tape:
    ...     y = ops.sum(x * x)
    >>> tape.backward(y)

Gradients accumulate into ``.grad`` of *leaf* tensors, i.e. tensors that
require gradients but were not produced by an op on the tape (parameters and
inputs).  Intermediate gradients are kept only for the duration of the sweep.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError

DTYPE = np.float64

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # Operator sugar; implementations live in avsync.ops.
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
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        """Backpropagate from this scalar through the active tape."""
        tape = active_tape()
        if tape is None:
            raise ContractError("backward() needs an active Tape; use tape.backward(loss)")
        tape.backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str = ""


@dataclass
class Tape:
    """Ordered record of executed differentiable ops."""

    nodes: list[Node] = field(default_factory=list)
    _produced: dict = field(default_factory=dict, repr=False)
    last_visits: int = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward, op: str = "") -> None:
        self.nodes.append(Node(out, tuple(inputs), backward, op))
        self._produced[id(out)] = out

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()
        self._produced.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ContractError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        visits = 0
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            visits += 1
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if id(inp) in self._produced:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = ig if prev is None else prev + ig
                elif inp.grad is None:
                    inp.grad = np.array(ig, dtype=DTYPE, copy=True)
                else:
                    inp.grad += ig
        self.last_visits = visits


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward, op: str = "") -> Tensor:
    """Wrap ``data`` and record it on the active tape if any input needs grad."""
    needs = any(t.requires_grad for t in inputs)
    tape = active_tape() if needs else None
    out = Tensor(data, requires_grad=tape is not None)
    if tape is not None:
        tape.record(out, inputs, backward, op)
    return out
