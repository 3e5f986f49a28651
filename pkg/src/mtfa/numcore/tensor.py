"""Tensor, Parameter and the operation tape used for reverse-mode autodiff.

Operations only record themselves when a :class:`Tape` is active and at least
one input requires a gradient, so plain inference pays nothing for autodiff.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when an operation receives inputs that violate its contract."""


class Tensor:
    """Dense real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class Parameter(Tensor):
    """Trainable tensor carrying its gradient accumulator and Adam state."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.data = np.array(self.data, copy=True)
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def astype(self, dtype) -> None:
        """Convert value and all optimizer state to ``dtype`` in place."""
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.adam_m = self.adam_m.astype(dtype)
        self.adam_v = self.adam_v.astype(dtype)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of the operations executed during one forward pass.

    Use as a context manager around the forward pass, then call
    :meth:`backward` once. Each record is visited exactly once, in reverse
    execution order, and the tape is emptied afterwards.

    Example::

        with Tape() as tape:
            loss = bce_loss(model(x), y)
        tape.backward(loss)
    """

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, output: Tensor, grad: Optional[np.ndarray] = None) -> int:
        """Propagate ``grad`` (default ones) from ``output`` to every leaf.

        Leaf gradients are accumulated into ``.grad``. Returns the number of
        records visited.
        """
        if grad is None:
            grad = np.ones_like(output.data)
        else:
            grad = np.asarray(grad, dtype=output.dtype)
            if grad.shape != output.shape:
                raise ContractError(
                    f"seed gradient shape {grad.shape} != output shape {output.shape}"
                )
        pending: dict[int, np.ndarray] = {}
        if output._leaf:
            _accumulate_leaf(output, grad)
        else:
            pending[id(output)] = grad
        visited = 0
        for out, parents, fn in reversed(self.records):
            visited += 1
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._leaf:
                    _accumulate_leaf(parent, pg)
                else:
                    key = id(parent)
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg
        self.records.clear()
        return visited


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def make_result(
    data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn
) -> Tensor:
    """Wrap ``data`` as an op output, recording it when gradients are needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._leaf = False
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.records.append((out, tuple(parents), backward))
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
