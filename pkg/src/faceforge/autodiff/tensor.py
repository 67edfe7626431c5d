"""Dense float tensors and the reverse-mode tape.

Design notes:
  * Tensors store float32 by default (float64 is what the finite-difference
    oracle runs in); data is treated as immutable once constructed.
  * Differentiable ops append nodes to the thread-local active tape in
    execution order, which is already a topological order, so the backward
    pass is a single reverse sweep visiting each node exactly once.
  * Gradients accumulate: a tensor consumed by several ops receives the sum
    of the incoming gradients.
"""

from __future__ import annotations

import threading

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class AutodiffError(ValueError):
    """Invalid op input: shape mismatch, non-finite values or bad dtype."""


def check_finite(arr: np.ndarray, ctx: str) -> None:
    if not np.isfinite(arr).all():
        raise AutodiffError(f"{ctx}: non-finite values in operand")


class Tensor:
    """Immutable dense array of 32- or 64-bit floats with a gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        if np.dtype(dtype) not in FLOAT_DTYPES:
            raise AutodiffError(f"unsupported dtype {dtype}")
        arr = np.ascontiguousarray(data, dtype=dtype)
        check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return (
            f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )


class _Node:
    """One executed op: output, inputs and the gradient closure."""

    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops (a Wengert list).

    Use as a context manager; ops executed inside record themselves when at
    least one input requires a gradient. ``backward`` runs one reverse sweep
    and accumulates ``.grad`` on every leaf tensor (a tensor that is not the
    output of any recorded op) with ``requires_grad=True``.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, output: Tensor, inputs, backward_fn) -> None:
        self._nodes.append(_Node(output, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise AutodiffError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for tensor, g in zip(node.inputs, node.backward_fn(g_out)):
                if g is None or not isinstance(tensor, Tensor) or not tensor.requires_grad:
                    continue
                if g.shape != tensor.data.shape:
                    raise AutodiffError(
                        f"backward produced gradient of shape {g.shape} "
                        f"for tensor of shape {tensor.data.shape}"
                    )
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        # whatever is left belongs to leaves; materialize on .grad once each
        done: set[int] = set()
        for node in self._nodes:
            for tensor in node.inputs:
                key = id(tensor)
                if tensor.requires_grad and key in grads and key not in done:
                    done.add(key)
                    g = grads[key]
                    tensor.grad = g if tensor.grad is None else tensor.grad + g
        if loss.requires_grad and id(loss) in grads and id(loss) not in done:
            g = grads[id(loss)]
            loss.grad = g if loss.grad is None else loss.grad + g
