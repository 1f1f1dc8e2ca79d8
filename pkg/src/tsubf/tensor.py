"""Dense tensor type and the reverse-mode tape.

A :class:`Tensor` wraps a contiguous numpy buffer.  Operations in
:mod:`tsubf.ops` record themselves on the innermost active :class:`Tape`
whenever one of their inputs tracks gradients; :meth:`Tape.backward` then
replays the recorded nodes in reverse.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()
_local = threading.local()


def _stack() -> list["Tape"]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A layer or model was configured with impossible shape arithmetic."""


class UsageError(ValueError):
    """An API was called outside its preconditions."""


class Tensor:
    """N-dimensional array with optional gradient tracking.

    Element precision is fixed at construction (``float32`` or ``float64``);
    operations never broadcast except between a tensor and a scalar.
    """

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
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

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def strides(self) -> tuple[int, ...]:
        """Row-major strides in elements."""
        return tuple(s // self.data.itemsize for s in self.data.strides)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.id for t in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.id


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; operations executed inside the ``with`` block
    on tensors that require gradients are appended to :attr:`nodes`.  The
    active-tape stack is per thread, so a tape only sees its own thread.
    """

    nodes: list[Node] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, vjp) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, vjp))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) through every recorded node.

        Leaves that track gradients get their ``.grad`` accumulated. Returns
        the leaf gradient buffers keyed by tensor id; intermediate buffers
        are released as soon as their producer has been processed.
        """
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        produced = set()
        for node in reversed(self.nodes):
            produced.add(node.output_id)
            g = grads.pop(node.output_id, None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
        seen = set()
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad and inp.id not in produced and inp.id not in seen:
                    seen.add(inp.id)
                    g = grads.get(inp.id)
                    if g is None:
                        g = np.zeros_like(inp.data)
                        grads[inp.id] = g
                    inp.grad = g.copy() if inp.grad is None else inp.grad + g
        self.grads = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray | None:
        return self.grads.get(t.id)

    def first_nonfinite(self) -> Node | None:
        """First recorded node whose output holds a NaN or inf."""
        for node in self.nodes:
            if not np.all(np.isfinite(node.output.data)):
                return node
        return None


def active_tape() -> Tape | None:
    tapes = _stack()
    return tapes[-1] if tapes else None


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``data`` and record it on the active tape if any input is tracked."""
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track, dtype=data.dtype)
    if track:
        tape.record(op, inputs, out, vjp)
    return out
