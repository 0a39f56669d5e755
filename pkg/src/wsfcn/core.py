"""Tensor value type, the recording tape and the parameter store.

Every tensor is a dense NCHW array.  Operations in :mod:`wsfcn.ops` record a
backward closure on the active :class:`Tape` whenever one of their inputs
requires a gradient; :meth:`Tape.backward` replays those closures in reverse
order and accumulates into the ``grad`` of leaf tensors (parameters and any
input created with ``requires_grad=True``).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when tensor extents do not fit an operation."""

    def __init__(self, op: str, dim: str, expected, got):
        self.op, self.dim, self.expected, self.got = op, dim, expected, got
        super().__init__(f"{op}: dimension '{dim}' expected {expected}, got {got}")


class Tensor:
    """A 4-D array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _leaf: bool = True):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ShapeError("Tensor", "rank", 4, arr.ndim)
        if min(arr.shape) < 1:
            raise ShapeError("Tensor", "extent", ">= 1", arr.shape)
        self.data = arr
        self.requires_grad = requires_grad
        self.is_leaf = _leaf
        self.grad = np.zeros_like(arr) if (requires_grad and _leaf) else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", "size", 1, self.data.size)
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def scalar(value: float, dtype=np.float64) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op executed inside the block whose inputs
    need gradients appends a node.  Nested tapes are allowed, the innermost
    one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError("backward", "loss size", 1, loss.data.size)
        if loss.is_leaf:
            if loss.requires_grad:
                loss.grad += 1.0
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad += gi
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording (e.g. for evaluation or pseudo-label generation)."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def record(out_data: np.ndarray, inputs: Sequence[Tensor],
           backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` in a Tensor and register ``backward`` on the active tape.

    ``backward`` maps the gradient of the output to one gradient (or None) per
    entry of ``inputs``.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, _leaf=not needs)
    if needs:
        tape.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def backward(tape: Tape, loss: Tensor, params: "ParamStore | None" = None) -> None:
    """Accumulate d(loss)/d(param) into every parameter's ``grad``."""
    if params is not None:
        for name, t in params.items():
            if t.grad is None or t.grad.shape != t.shape:
                raise ShapeError("backward", f"grad of {name}", t.shape, None)
    tape.backward(loss)


class ParamStore:
    """Named trainable tensors with learning-rate multipliers.

    Names are hierarchical (``"fca.srm/weight"``); iteration is lexicographic.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._lr_mult: dict[str, float] = {}

    def add(self, name: str, value: np.ndarray, lr_multiplier: float = 1.0) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        if lr_multiplier <= 0:
            raise ValueError("lr_multiplier must be positive")
        t = Tensor(value, requires_grad=True)
        self._entries[name] = t
        self._lr_mult[name] = float(lr_multiplier)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._entries[name]

    def lr_multiplier(self, name: str) -> float:
        return self._lr_mult[name]

    def set_lr_multiplier(self, prefix: str, value: float) -> None:
        for name in self._entries:
            if name.startswith(prefix):
                self._lr_mult[name] = float(value)

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad[...] = 0.0

    def count(self, prefix: str = "") -> int:
        return sum(t.data.size for n, t in self._entries.items() if n.startswith(prefix))

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, t in self.items():
            out.add(name, t.data.astype(dtype), self._lr_mult[name])
        return out
