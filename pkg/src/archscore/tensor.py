"""Dense tensors plus a recorded-tape reverse-mode autodiff engine.

The engine is deliberately small: forward passes record primitive
operations onto a ``Tape``; ``backward`` replays the tape in reverse and
accumulates gradients.  Everything is plain numpy, little-endian,
row-major.  Reductions that feed losses or scores accumulate in float64
even when tensor storage is float32.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np


class ShapeError(ValueError):
    """Raised when an operand's shape does not match a layer's contract."""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class NumericError(RuntimeError):
    """Raised when a computation produces non-finite values."""


# Pluggable inner matmul.  The default numpy matmul is all the engine
# needs; swap in a tuned kernel here if one is available.
_matmul_hook: Callable[[np.ndarray, np.ndarray], np.ndarray] = np.matmul


def set_matmul_hook(fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> None:
    global _matmul_hook
    _matmul_hook = fn


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _matmul_hook(a, b)


def as_dtype(dtype) -> np.dtype:
    d = np.dtype(dtype)
    if d not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported tensor dtype {d}; use float32 or float64")
    return d


class Tensor:
    """A dense real array with an optional gradient slot.

    Invariants: ``grad``, when present, has the same shape as ``data``.
    A Tensor/Tape pair is confined to one worker at a time; distinct
    graphs may be driven concurrently.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Node:
    """One recorded primitive: inputs, output, and a pullback closure.

    ``bwd`` maps the output gradient to a tuple of input gradients
    (``None`` for inputs that need no gradient).
    """

    __slots__ = ("op", "inputs", "output", "bwd")

    def __init__(self, op: str, inputs: tuple, output: Tensor,
                 bwd: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.bwd = bwd


class Tape:
    """Recorded forward graph; node order is a topological order by construction."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, op: str, inputs: tuple, output: Tensor,
               bwd: Callable[[np.ndarray], tuple]) -> Tensor:
        self.nodes.append(Node(op, inputs, output, bwd))
        return output

    def outputs_of(self, op: str) -> list[Tensor]:
        return [n.output for n in self.nodes if n.op == op]


def backward(tape: Tape, loss: Tensor,
             wrt: Optional[Iterable[Tensor]] = None) -> dict[int, np.ndarray]:
    """Reverse the tape from a scalar loss.

    Populates ``t.grad`` for every tensor with ``requires_grad`` and
    returns a map ``id(tensor) -> gradient array`` covering those
    tensors plus any extra tensors passed in ``wrt`` (useful for
    activations that are not leaves).
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    want: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if isinstance(t, Tensor) and t.requires_grad:
                want[id(t)] = t
    if loss.requires_grad:
        want[id(loss)] = loss
    if wrt is not None:
        for t in wrt:
            want[id(t)] = t

    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)
    }
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if id(node.output) in want:
            # keep a copy for requested intermediate outputs
            grads[id(node.output)] = g_out if g_out is not None else None
        if g_out is None:
            continue
        in_grads = node.bwd(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not isinstance(t, Tensor):
                continue
            key = id(t)
            if key in grads and grads[key] is not None and key != id(node.output):
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    out: dict[int, np.ndarray] = {}
    for key, t in want.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        if t.requires_grad:
            t.grad = g
        out[key] = g
    return out


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    """L2 norm over a collection of arrays, accumulated in float64."""
    total = 0.0
    for a in arrays:
        total += float(np.sum(np.asarray(a, dtype=np.float64) ** 2))
    return float(np.sqrt(total))
