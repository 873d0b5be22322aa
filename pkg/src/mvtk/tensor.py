"""Dense tensors with a recording tape for reverse-mode differentiation.

Feature maps are NCHW. Token matrices produced by :func:`mvtk.layers.unfold`
are rank-4 ``(N, P, S, d)`` so every value flowing through a block keeps four
axes; logits are the one rank-2 exception.
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GradientError

DTYPES = (np.float32, np.float64)

_state = threading.local()


def _tape() -> "Tape":
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable recording inside the block (inference, finite differences)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A numpy array plus autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "name", "is_leaf", "retains_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if dtype is None and not isinstance(data, np.ndarray):
            dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True
        self.retains_grad = False

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def retain_grad(self) -> "Tensor":
        """Keep ``.grad`` on a non-leaf after backward."""
        self.retains_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self):
        from . import ops
        return ops.sum(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


class Tape:
    """Ordered log of differentiable operations.

    Backward walks the log in exact reverse of recording order, which is a
    valid topological order because an op can only consume tensors that
    already exist.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, op: str, output: Tensor, inputs: tuple, backward_fn) -> None:
        self.nodes.append(Node(inputs, output, backward_fn, op))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape:
    return _tape()


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out_data`` and log the op if any input needs a gradient."""
    out = Tensor(out_data, dtype=out_data.dtype)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        _tape().record(op, out, tuple(inputs), backward_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        raise GradientError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on, then clear the tape."""
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")
    tape = _tape()
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(tape.nodes):
            out = node.output
            g = out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is not None and inp.requires_grad:
                    _accumulate(inp, gi)
            if not out.retains_grad and out is not loss:
                out.grad = None
    finally:
        tape.clear()


class MacCounter:
    """Tallies multiplies actually executed by ops, by category."""

    def __init__(self):
        self.counts: Counter = Counter()

    def add(self, kind: str, n: int) -> None:
        self.counts[kind] += int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def active_counter() -> Optional[MacCounter]:
    return getattr(_state, "counter", None)


@contextmanager
def count_macs():
    """Instrument every conv/matmul/mul executed inside the block."""
    prev = active_counter()
    counter = _state.counter = MacCounter()
    try:
        yield counter
    finally:
        _state.counter = prev


def tally(kind: str, n: int) -> None:
    c = active_counter()
    if c is not None:
        c.add(kind, n)


def kink_log_active() -> Optional[list]:
    return getattr(_state, "kinks", None)


@contextmanager
def kink_log():
    """Collect the active-side masks of every piecewise-linear op run inside the block.

    Finite differences are only meaningful when both probes stay on the same
    side of every kink; gradient checking compares these masks.
    """
    prev = kink_log_active()
    log = _state.kinks = []
    try:
        yield log
    finally:
        _state.kinks = prev
