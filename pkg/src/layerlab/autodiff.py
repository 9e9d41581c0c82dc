"""Dense float32 tensors with reverse-mode automatic differentiation.

Ops record onto the innermost active GradTape (a thread-local stack, so
independent networks can train on separate threads). The tape's recording
order is already a topological order of the graph, so the backward pass is
a single reverse sweep. Gradients for a tensor used in several places sum,
which is what residual skip connections need.
"""

import os
import threading
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


# LAYERLAB_DEBUG=1 turns on NaN/Inf checks after every op (debug builds).
DEBUG_CHECKS = os.environ.get("LAYERLAB_DEBUG", "") not in ("", "0")

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> Optional["GradTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Op:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class GradTape:
    """Ordered record of ops; one backward sweep per tape."""

    def __init__(self):
        self._ops: list[_Op] = []
        self._needs: set[int] = set()
        self._used = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def record(
        self,
        output: Tensor,
        inputs: Sequence[Tensor],
        backward_fn: Callable[[np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]],
    ) -> None:
        """backward_fn(grad_out, needs) returns one grad (or None) per input."""
        if any(t.requires_grad or id(t) in self._needs for t in inputs):
            self._needs.add(id(output))
            self._ops.append(_Op(output, tuple(inputs), backward_fn))

    def needs_grad(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._needs

    def reset(self) -> None:
        self._ops.clear()
        self._needs.clear()
        self._used = False

    def backward(self, output: Tensor) -> None:
        """Accumulate d(output)/d(leaf) into .grad of every requires_grad leaf."""
        if self._used:
            raise TapeError("backward already ran on this tape; reset() first")
        if output.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        self._used = True
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for op in reversed(self._ops):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            needs = tuple(self.needs_grad(t) for t in op.inputs)
            for t, ig in zip(op.inputs, op.backward_fn(g, needs)):
                if ig is None:
                    continue
                if ig.shape != t.data.shape:
                    raise ShapeError(
                        f"backward rule produced grad of shape {ig.shape} "
                        f"for input of shape {t.data.shape}"
                    )
                prev = grads.get(id(t))
                grads[id(t)] = ig if prev is None else prev + ig
        # leaves are requires_grad tensors no tape op produced; their dict
        # entries survive the sweep (covers the degenerate f(x) = x case too)
        leaves: dict[int, Tensor] = {}
        if output.requires_grad:
            leaves[id(output)] = output
        for op in self._ops:
            for t in op.inputs:
                if t.requires_grad:
                    leaves[id(t)] = t
        for tid, t in leaves.items():
            g = grads.get(tid)
            if g is not None:
                gg = np.asarray(g, dtype=np.float32)
                t.grad = gg if t.grad is None else t.grad + gg


def _check_finite(arr: np.ndarray, what: str) -> None:
    if DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {what}")


def _result(data: np.ndarray, what: str) -> Tensor:
    _check_finite(data, what)
    return Tensor(data)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = _result(a.data @ b.data, "matmul")

    def backward(g, needs):
        da = g @ b.data.T if needs[0] else None
        db = a.data.T @ g if needs[1] else None
        return da, db

    tape = active_tape()
    if tape is not None:
        tape.record(out, (a, b), backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also supports the [n,k]+[k] bias-add broadcast."""
    bias_add = a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]
    if not bias_add and a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = _result(a.data + b.data, "add")

    def backward(g, needs):
        da = g if needs[0] else None
        if not needs[1]:
            db = None
        elif bias_add:
            db = g.sum(axis=0)
        else:
            db = g
        return da, db

    tape = active_tape()
    if tape is not None:
        tape.record(out, (a, b), backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    out = _result(a.data * b.data, "mul")

    def backward(g, needs):
        da = g * b.data if needs[0] else None
        db = g * a.data if needs[1] else None
        return da, db

    tape = active_tape()
    if tape is not None:
        tape.record(out, (a, b), backward)
    return out


def relu(a: Tensor) -> Tensor:
    out = _result(np.maximum(a.data, 0.0), "relu")

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        return (g * (a.data > 0.0),)

    tape = active_tape()
    if tape is not None:
        tape.record(out, (a,), backward)
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = _result(a.data.reshape(shape), "reshape")
    orig = a.data.shape

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        return (g.reshape(orig),)

    tape = active_tape()
    if tape is not None:
        tape.record(out, (a,), backward)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _result(a.data.sum(dtype=np.float32).reshape(()), "sum")

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        return (np.broadcast_to(g, a.data.shape).astype(np.float32),)

    tape = active_tape()
    if tape is not None:
        tape.record(out, (a,), backward)
    return out


def grad_check(fn, x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn must be a deterministic Tensor -> scalar Tensor map. The error metric
    is max |analytic - fd| / max(1, |analytic|) over all elements.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if not x.requires_grad:
        raise ValueError("grad_check input must have requires_grad=True")
    x.data = np.ascontiguousarray(x.data)
    x.zero_grad()
    with GradTape() as tape:
        y = fn(x)
        if y.size != 1:
            raise ShapeError(f"grad_check fn must return a scalar, got {y.shape}")
        tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.astype(np.float64)

    flat = x.data.reshape(-1)
    fd = np.empty(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(x).item()
        flat[i] = orig - eps
        fm = fn(x).item()
        flat[i] = orig
        fd[i] = (fp - fm) / (2.0 * eps)
    if not (np.all(np.isfinite(fd)) and np.all(np.isfinite(analytic))):
        raise FloatingPointError("non-finite values during grad_check")
    rel = np.abs(analytic.reshape(-1) - fd) / np.maximum(1.0, np.abs(analytic.reshape(-1)))
    return float(rel.max()) if rel.size else 0.0
