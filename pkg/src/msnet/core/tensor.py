"""Dense tensor value type and the reverse-mode tape."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "no_grad",
    "is_grad_enabled",
    "current_tracer",
]


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.tracer = None


_state = _State()


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording for the enclosed operations (per thread)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def current_tracer():
    return _state.tracer


@contextlib.contextmanager
def _tracing(tracer) -> Iterator[None]:
    prev_tracer, prev_grad = _state.tracer, _state.grad_enabled
    _state.tracer, _state.grad_enabled = tracer, False
    try:
        yield
    finally:
        _state.tracer, _state.grad_enabled = prev_tracer, prev_grad


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: Tuple["Tensor", ...], backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    """A dense real array that can take part in reverse-mode differentiation.

    Feature maps use (batch, channel, height, width) order. Integer inputs are
    promoted to float64; float32 and float64 are kept as given.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise ValueError(f"tensor rank must be at most 4, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(leaf) . seed into every reachable leaf's ``grad``.

        Double-backward is not supported: the adjoint computations are not
        themselves recorded.
        """
        if self._node is None and not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that is not attached to a tape")
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=self.dtype)
            if seed.shape != self.shape:
                raise ValueError(f"seed shape {seed.shape} does not match output shape {self.shape}")
        tape = Tape(self)
        grads = {id(self): seed}
        for t in reversed(tape.records):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            parent_grads = t._node.backward(g)
            for p, pg in zip(t._node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                elif id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        if self._node is None:
            self.grad = seed.copy() if self.grad is None else self.grad + seed

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

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def __repr__(self) -> str:
        d = self.data
        if d.size and np.issubdtype(d.dtype, np.floating) and d.strides and not any(d.strides):
            stats = "traced"
        elif d.size:
            stats = f"mean={d.mean():.4g} std={d.std():.4g} min={d.min():.4g} max={d.max():.4g}"
        else:
            stats = "empty"
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(d.shape)}, dtype={d.dtype}, {stats}{flag})"


class Parameter(Tensor):
    """A learnable leaf tensor."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Tape:
    """Operations reachable from ``output``, in topological order.

    Every record appears after all records producing its inputs; backward
    walks the list in reverse and visits each record once.
    """

    def __init__(self, output: Tensor):
        order = []
        seen = set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._node.parents:
                if p._node is not None and id(p) not in seen:
                    stack.append((p, False))
        self.records: list = order

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def ops(self) -> list:
        return [t._node.op for t in self.records]


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op's output, recording it on the tape when any input needs grad."""
    out = Tensor(data)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, tuple(parents), backward)
    return out
