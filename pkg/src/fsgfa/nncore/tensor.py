"""Tensors, parameters and the reverse-mode tape."""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode gradients."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # arithmetic sugar; the real work lives in ops
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


def _scalar_error(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """A named trainable (or frozen) tensor."""

    def __init__(self, data, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, name=name, dtype=dtype)
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class _Record:
    __slots__ = ("output", "inputs", "backward_fn", "op")

    def __init__(self, output, inputs, backward_fn, op):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered log of differentiable operations executed while the tape is active.

    Use as a context manager; every op whose inputs require gradients appends
    one record. :meth:`backward` walks the records once, newest first.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable, op: str):
        self.records.append(_Record(output, tuple(inputs), backward_fn, op))

    def backward(self, loss: Tensor, parameters: Optional[Iterable[Tensor]] = None):
        return backward(self, loss, parameters)


def active_tape() -> Optional[Tape]:
    return Tape._stack[-1] if Tape._stack else None


@contextlib.contextmanager
def no_tape():
    """Temporarily disable recording (used for inference and finite differences)."""
    saved = Tape._stack[:]
    Tape._stack.clear()
    try:
        yield
    finally:
        Tape._stack[:] = saved


class DecisionLog:
    """Collects the branch choices of non-smooth ops (ReLU masks, max-pool winners,
    L1 signs) while active. Finite-difference checks compare logs across a
    stencil to detect when it straddles a kink."""

    _active: list["DecisionLog"] = []

    def __init__(self):
        import hashlib

        self._hash = hashlib.blake2b(digest_size=16)

    def __enter__(self):
        DecisionLog._active.append(self)
        return self

    def __exit__(self, *exc):
        DecisionLog._active.remove(self)
        return False

    def digest(self) -> bytes:
        return self._hash.digest()


def log_decision(arr: np.ndarray):
    if DecisionLog._active:
        data = np.ascontiguousarray(arr).tobytes()
        for log in DecisionLog._active:
            log._hash.update(data)


def make_result(data: np.ndarray, inputs: Sequence, backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as a Tensor and record it on the active tape if needed.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    parents = [x for x in inputs if isinstance(x, Tensor)]
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(out, inputs, backward_fn, op)
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if g.shape != t.shape:
        g = _unbroadcast(g, t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor, parameters: Optional[Iterable[Tensor]] = None):
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Parameters listed in ``parameters`` that the loss does not reach get an
    explicit zero gradient. Returns the number of records visited.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    visited = 0
    for rec in reversed(tape.records):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        visited += 1
        in_grads = rec.backward_fn(g_out)
        for inp, g in zip(rec.inputs, in_grads):
            if g is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                g = _unbroadcast(g, inp.shape)
            prev = grads.get(id(inp))
            grads[id(inp)] = g if prev is None else prev + g
    # leaves: anything never produced by a record keeps its gradient
    produced = {id(rec.output) for rec in tape.records}
    leaves = {}
    for rec in tape.records:
        for inp in rec.inputs:
            if isinstance(inp, Tensor) and inp.requires_grad and id(inp) not in produced:
                leaves[id(inp)] = inp
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is not None:
            _accumulate(leaf, g)
    if parameters is not None:
        for p in parameters:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    return visited
