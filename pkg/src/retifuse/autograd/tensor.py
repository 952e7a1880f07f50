"""Dense float tensors and the tape that records operations on them.

A :class:`Tensor` wraps a numpy buffer.  Operations only build a graph while a
:class:`GradTape` is active on the current thread; outside a tape every op is a
plain numpy computation.  ``tape.backward(loss)`` walks the recorded ops in
reverse order and returns a gradient for every leaf that requires one.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_local = threading.local()


class ShapeError(ValueError):
    """Raised for invalid shapes or incompatible operand shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up where finite values are required."""


def get_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of newly created tensors.

    Training always runs in float32.  float64 exists for finite-difference
    oracles, where float32 rounding would swamp the step size.
    """
    previous = get_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = previous


def debug_enabled() -> bool:
    return getattr(_local, "debug", False)


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Check finiteness after every primitive while active."""
    previous = debug_enabled()
    _local.debug = enabled
    try:
        yield
    finally:
        _local.debug = previous


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: every extent must be >= 1")
    return shape


class Tensor:
    """n-dimensional float array, row-major, with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=get_dtype(), copy=True, order="C")
        _check_shape(arr.shape)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # internal constructor for op outputs: no copy, no finiteness scan
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=get_dtype())
        out.data = arr if arr.flags.c_contiguous else arr.copy()
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

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

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; implementations live in functional.py
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def sum(self):
        from . import functional as F
        return F.sum(self)

    def mean(self):
        from . import functional as F
        return F.mean(self)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# creation

def create(shape: Sequence[int], init: str = "zeros", *, value: float = 0.0,
           seed: int | None = None, low: float = -1.0, high: float = 1.0,
           fan_in: int | None = None, requires_grad: bool = False) -> Tensor:
    """Build a tensor of ``shape`` filled according to ``init``.

    ``init`` is one of ``zeros``, ``constant`` (uses ``value``), ``uniform``
    (``seed``, ``low``, ``high``) or ``kaiming`` (He-uniform with bound
    ``sqrt(6 / fan_in)``; ``fan_in`` defaults to ``prod(shape[1:])``).
    """
    shape = _check_shape(shape)
    dtype = get_dtype()
    if init == "zeros":
        arr = np.zeros(shape, dtype=dtype)
    elif init == "constant":
        if not np.isfinite(value):
            raise NonFiniteError(f"constant fill {value!r} is not finite")
        arr = np.full(shape, value, dtype=dtype)
    elif init == "uniform":
        if not (np.isfinite(low) and np.isfinite(high)) or high < low:
            raise ValueError(f"bad uniform bounds [{low}, {high}]")
        rng = np.random.default_rng(seed)
        arr = rng.uniform(low, high, size=shape).astype(dtype)
    elif init == "kaiming":
        if fan_in is None:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0] if shape else 1
        bound = float(np.sqrt(6.0 / fan_in))
        rng = np.random.default_rng(seed)
        arr = rng.uniform(-bound, bound, size=shape).astype(dtype)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor._wrap(arr, requires_grad=requires_grad)


def zeros(shape, requires_grad=False) -> Tensor:
    return create(shape, "zeros", requires_grad=requires_grad)


def constant(shape, value: float, requires_grad=False) -> Tensor:
    return create(shape, "constant", value=value, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# tape

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


def active_tape() -> "GradTape | None":
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of differentiable ops executed while the tape is active.

    Entries are appended in execution order, which is already a topological
    order of the graph.  Use as a context manager::

        with GradTape() as tape:
            loss = model.loss(batch, labels)
        grads = tape.backward(loss, wrt=params)
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "GradTape":
        if not hasattr(_local, "tapes"):
            _local.tapes = []
        _local.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.remove(self)

    def record(self, op: str, inputs: Iterable[Tensor], output: Tensor, backward: BackwardFn) -> None:
        self.entries.append(TapeEntry(op, tuple(inputs), output, backward))

    def leaves(self) -> list[Tensor]:
        produced = {id(e.output) for e in self.entries}
        seen: dict[int, Tensor] = {}
        for e in self.entries:
            for t in e.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. every leaf on the tape (and ``wrt``).

        Leaves that the loss does not depend on get zero gradients.  Each
        returned array is also stored on ``tensor.grad``.
        """
        if loss.data.size != 1 or loss.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        targets = self.leaves()
        if wrt is not None:
            known = {id(t) for t in targets}
            targets += [t for t in wrt if id(t) not in known]
        if not loss.requires_grad and not any(t is loss for t in targets):
            raise ValueError("loss was not produced by an op recorded on this tape")

        target_ids = {id(t) for t in targets}
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for entry in reversed(self.entries):
            g = grads.get(id(entry.output))
            if g is None:
                continue
            if id(entry.output) not in target_ids:
                del grads[id(entry.output)]
            in_grads = entry.backward(g)
            for t, gi in zip(entry.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(f"{entry.op}: gradient shape {gi.shape} != input shape {t.shape}")
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi

        out: dict[Tensor, np.ndarray] = {}
        for t in targets:
            g = grads.get(id(t))
            g = np.zeros(t.shape, dtype=t.data.dtype) if g is None else np.asarray(g, dtype=t.data.dtype)
            t.grad = g
            out[t] = g
        return out


def backward(tape: GradTape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss, wrt)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op's output and record it on the active tape when needed."""
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    if debug_enabled() and not np.isfinite(out.data).all():
        raise NonFiniteError(f"{op} produced NaN or Inf")
    return out
