"""Tensor values and the reverse-mode tape.

A :class:`Tensor` wraps an immutable numpy array. Operations in
:mod:`cmm.core.ops` record themselves on the active :class:`Tape` whenever one
of their inputs requires a gradient; ``Tape.backward`` then replays the
records in reverse order.

Precision is float64 unless ``CMM_FLOAT32=1`` is set before import. Setting
``CMM_DEBUG=1`` makes every op check its output for NaN/Inf.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32 if os.environ.get("CMM_FLOAT32", "0") == "1" else np.float64
DEBUG = os.environ.get("CMM_DEBUG", "0") == "1"


class NumericError(FloatingPointError):
    """Raised when a non-finite value appears (debug mode) or a loss diverges."""


class UsageError(RuntimeError):
    """Raised when the tape is used out of contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Thin operator sugar; the functional forms live in ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf. Always requires a gradient."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_tape_stack: list["Tape"] = []
_grad_disabled = 0


class Tape:
    """Ordered record of primitive ops for one backward pass.

    Use as a context manager; ops executed inside it are recorded.
    """

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: BackwardFn) -> None:
        self.ops.append((out, parents, backward))
        self._produced.add(id(out))

    def reset(self) -> None:
        self.ops.clear()
        self._produced.clear()
        self._consumed = False

    def backward(self, root: Tensor) -> dict[Parameter, np.ndarray]:
        """Gradients of the scalar ``root`` w.r.t. every parameter it depends on.

        Parameters the root does not depend on are absent from the result.
        """
        if self._consumed:
            raise UsageError("backward already called on this tape; call reset() first")
        if root.size != 1:
            raise UsageError(f"backward root must be a scalar, got shape {root.shape}")
        if id(root) not in self._produced and not isinstance(root, Parameter):
            raise UsageError("backward root was not produced on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, Parameter] = {}
        if isinstance(root, Parameter):
            leaves[id(root)] = root
        for out, parents, fn in reversed(self.ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = fn(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if isinstance(p, Parameter):
                    leaves[key] = p
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
        return {p: grads[k] for k, p in leaves.items() if k in grads}


def active_tape() -> Tape | None:
    if _grad_disabled or not _tape_stack:
        return None
    return _tape_stack[-1]


class no_grad:
    """Context manager that suspends recording (inference paths)."""

    def __enter__(self):
        global _grad_disabled
        _grad_disabled += 1
        return self

    def __exit__(self, *exc):
        global _grad_disabled
        _grad_disabled -= 1


def make(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    """Wrap an op result and record it if any parent requires a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    if DEBUG and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by op")
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    else:
        out.requires_grad = False
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
