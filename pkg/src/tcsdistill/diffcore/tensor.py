"""Tensor container and the reverse-mode tape."""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible.

    Both offending shapes are kept on the exception so callers (and test
    failures) can report exactly what disagreed.
    """

    def __init__(self, op: str, left: tuple, right: tuple, detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        msg = f"{op}: incompatible shapes {self.left} and {self.right}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient.

    Feature maps and rasters use the (batch, channel, height, width) layout;
    token sequences are rank 3 (batch, tokens, width).
    """

    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, (), "tensor is not a scalar")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; the implementations live in ops
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


Grid4 = Tensor


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "tape")

    def __init__(self, out, parents, backward_fn, tape):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives.

    Operations are recorded only while a tape is active (``with Tape():``)
    and only when at least one input requires a gradient, so frozen-model
    forwards run tape-free.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward; start a new forward")
        node = _Node(out, tuple(parents), backward_fn, self)
        out._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward already ran on this tape; run a new forward first")
        if loss.data.size != 1:
            raise ShapeError("backward", loss.shape, (), "loss must be a scalar")
        if loss._node is None or loss._node.tape is not self:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                if parent._node is None:
                    if parent.grad is None:
                        parent.grad = np.array(pg, dtype=np.float64, copy=True).reshape(parent.shape)
                    else:
                        parent.grad += pg
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        self.consumed = True
        # release saved activations; outputs keep a handle to the spent tape
        for node in self.nodes:
            node.backward_fn = None
            node.parents = ()
        self.nodes.clear()


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it."""
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, (), "loss must be a scalar")
    if loss._node is None:
        raise TapeError("loss is not on a tape (was it computed inside `with Tape():`?)")
    loss._node.tape.backward(loss)
