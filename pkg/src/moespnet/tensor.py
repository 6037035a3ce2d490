"""Rank-4 tensors and reverse-mode differentiation.

Every value flowing through a model is a ``Tensor`` holding a numpy array of
shape (batch, channels, height, width).  Operations that involve at least one
tensor with ``requires_grad`` record an ``Op`` on their output; ``backward``
collects those ops into a ``Graph`` in topological order and walks it once in
reverse.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """A documented precondition was violated by the caller."""


class GraphError(RuntimeError):
    """The recorded computation cannot be ordered for differentiation."""


def default_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily switch the dtype of newly created tensors (32 or 64)."""
    global _DTYPE
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    old = _DTYPE
    _DTYPE = np.float64 if bits == 64 else np.float32
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


@dataclass(eq=False)
class Op:
    """One recorded operation: its inputs and a rule mapping d(out) to d(inputs).

    ``backward`` returns one gradient array (or None) per input, in order.
    """

    name: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor must be rank 4 (N, C, H, W), got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: Op | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the functional forms live in ``moespnet.layers``
    def __add__(self, other: "Tensor") -> "Tensor":
        from moespnet.layers import add
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from moespnet.layers import mul
        return mul(self, other)


def make_result(data: np.ndarray, name: str, inputs: Sequence[Tensor],
                backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``data`` as an op output, recording the op when any input needs grads."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = Op(name, tuple(inputs), backward)
    return out


@dataclass
class Graph:
    """Ops reachable from one output, ordered so every op follows its inputs' producers."""

    ops: list[Op] = field(default_factory=list)
    outputs: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = done
        stack: list[tuple[Tensor, int]] = [(root, 0)]
        while stack:
            t, i = stack.pop()
            if t.op is None:
                continue
            if i == 0:
                s = state.get(id(t))
                if s == 2:
                    continue
                if s == 1:
                    raise GraphError(f"cycle detected at op {t.op.name!r}")
                state[id(t)] = 1
            if i < len(t.op.inputs):
                stack.append((t, i + 1))
                child = t.op.inputs[i]
                if child.op is not None:
                    cs = state.get(id(child))
                    if cs == 1:
                        raise GraphError(f"cycle detected at op {child.op.name!r}")
                    if cs is None:
                        stack.append((child, 0))
            else:
                state[id(t)] = 2
                order.append(t)
        return cls(ops=[t.op for t in order], outputs=order)  # type: ignore[misc]

    def __len__(self) -> int:
        return len(self.ops)


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Populate ``.grad`` on every leaf tensor with ``requires_grad`` reachable from ``loss``.

    Leaf gradients are overwritten, not accumulated.  Intermediate gradients are
    dropped once consumed.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ContractError(f"backward needs a scalar loss of shape (1,1,1,1), got {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.op is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for out in reversed(graph.outputs):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        op = out.op
        in_grads = op.backward(g)
        for t, gi in zip(op.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"op {op.name!r} produced grad {gi.shape} for input {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.op is None:
                leaves[key] = t
    for key, t in leaves.items():
        t.grad = grads[key].astype(t.data.dtype, copy=False)
    return graph


def seed_rng(seed) -> np.random.Generator:
    """Deterministic generator; ``seed`` may be an int or a sequence of ints."""
    return np.random.Generator(np.random.PCG64(seed))
