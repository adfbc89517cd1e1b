"""Dense float32 tensor with a tape-based reverse-mode autodiff."""
from __future__ import annotations

import contextlib
import threading

import numpy as np


class Tape:
    """Ordered record of differentiable ops.

    Each record is ``(output, inputs, backward_fn)``; ``backward_fn`` maps the
    output gradient to a tuple with one gradient (or None) per input.
    """

    def __init__(self):
        self.records = []
        self.enabled = True

    def record(self, out, inputs, backward_fn):
        self.records.append((out, inputs, backward_fn))

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


_state = threading.local()


def get_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def grad_enabled() -> bool:
    return get_tape().enabled


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily carry new tensors in ``dtype`` (float64 for gradient checks)."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "is_param")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=default_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.is_param = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar, defined in ops to avoid a cycle
    def __add__(self, other):
        from . import ops
        return ops.add(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, -other)

    def __rsub__(self, other):
        from . import ops
        return ops.add_scalar(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other) if isinstance(other, Tensor) else ops.scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def make_result(data, inputs, backward_fn) -> Tensor:
    """Wrap op output and record it when any input needs a gradient."""
    tape = get_tape()
    needs = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, tuple(inputs), backward_fn)
    return out


def backward(loss: Tensor):
    """Fill ``.grad`` of every requires_grad tensor reachable from ``loss``.

    Records are visited in exact reverse order and the tape is cleared
    afterwards. Leaf gradients accumulate across calls.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    grads = {id(loss): np.ones_like(loss.data)}
    produced = set()
    seen = {id(loss): loss}
    for out, inputs, fn in reversed(tape.records):
        produced.add(id(out))
        g = grads.get(id(out))
        if g is None:
            continue
        out.grad = g
        in_grads = fn(g)
        for inp, gi in zip(inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            seen[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=inp.data.dtype)
    for key, t in seen.items():
        if key in produced:
            continue
        g = grads[key].astype(t.data.dtype, copy=False)
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.clear()
