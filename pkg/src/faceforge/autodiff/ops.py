"""Differentiable operations over Tensors.

Every op validates shapes and dtypes, computes the forward value, and (when
an input requires a gradient and a tape is active) records a backward
closure on the tape. Finite-ness is enforced at op boundaries by the Tensor
constructor: every op output is validated there, so non-finite values are
rejected the moment they appear.

Reductions (sum/mean/norm/bias-gradients) accumulate in float64 regardless
of storage dtype; matrix products use the BLAS accumulation of the storage
dtype. There is no implicit broadcasting: elementwise ops require identical
shapes, which keeps every gradient path explicit and checkable.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import AutodiffError, Tensor, active_tape

# number of op executions since import; used to assert that inference paths
# run an input-independent number of operations
OP_COUNT = 0


def op_count() -> int:
    return OP_COUNT


def _result(data, inputs, backward_fn) -> Tensor:
    global OP_COUNT
    OP_COUNT += 1
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        tape.record(out, inputs, backward_fn)
    return out


def _check_tensors(ctx, *tensors):
    # float32 and float64 may mix (the finite-difference oracle runs nets in
    # float64); numpy promotion decides the output dtype
    for t in tensors:
        if not isinstance(t, Tensor):
            raise AutodiffError(f"{ctx}: expected Tensor, got {type(t).__name__}")


def _same_shape(ctx, a, b):
    if a.shape != b.shape:
        raise AutodiffError(f"{ctx}: shape mismatch {a.shape} vs {b.shape}")


def _fsum(arr, axis=None, keepdims=False):
    """Reduction with float64 accumulation, cast back to the input dtype."""
    return np.sum(arr, axis=axis, keepdims=keepdims, dtype=np.float64).astype(arr.dtype)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """w @ x + b for a single vector, or row-wise for a (batch, n) input."""
    _check_tensors("affine", x, w, b)
    if w.data.ndim != 2 or b.data.ndim != 1:
        raise AutodiffError(f"affine: weight must be 2-d and bias 1-d, got {w.shape}, {b.shape}")
    m, n = w.shape
    if b.shape[0] != m:
        raise AutodiffError(f"affine: bias shape {b.shape} does not match weight {w.shape}")
    if x.data.ndim == 1:
        if x.shape[0] != n:
            raise AutodiffError(f"affine: input shape {x.shape} does not match weight {w.shape}")
        y = w.data @ x.data + b.data

        def backward(g):
            return g @ w.data, np.outer(g, x.data), g

        return _result(y, (x, w, b), backward)
    if x.data.ndim == 2:
        if x.shape[1] != n:
            raise AutodiffError(f"affine: input shape {x.shape} does not match weight {w.shape}")
        y = x.data @ w.data.T + b.data

        def backward(g):
            db = _fsum(g, axis=0)
            return g @ w.data, g.T @ x.data, db

        return _result(y, (x, w, b), backward)
    raise AutodiffError(f"affine: input must be 1-d or 2-d, got shape {x.shape}")


def conv2d(x: Tensor, k: Tensor, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1, stride 1 or 2.

    Accepts a single image (c,h,w) or a batch (b,c,h,w); kernels are
    (k_out, c, 3, 3). Output spatial size is ceil(h/stride).
    """
    _check_tensors("conv2d", x, k)
    if stride not in (1, 2):
        raise AutodiffError(f"conv2d: unsupported stride {stride}")
    if k.data.ndim != 4 or k.shape[2] != 3 or k.shape[3] != 3:
        raise AutodiffError(f"conv2d: kernels must be (k,c,3,3), got {k.shape}")
    squeeze = x.data.ndim == 3
    x4 = x.data[None] if squeeze else x.data
    if x4.ndim != 4:
        raise AutodiffError(f"conv2d: input must be (c,h,w) or (b,c,h,w), got {x.shape}")
    b, c, h, w = x4.shape
    if c != k.shape[1]:
        raise AutodiffError(f"conv2d: input channels {c} do not match kernels {k.shape}")
    if h < 3 or w < 3:
        raise AutodiffError(f"conv2d: spatial size must be >= 3, got {h}x{w}")
    y4 = kernels.conv2d_forward(x4, k.data, stride)

    def backward(g):
        g4 = g[None] if squeeze else g
        dx = kernels.conv2d_backward_input(g4, k.data, stride, h, w)
        dk = kernels.conv2d_backward_kernels(g4, x4, stride)
        return dx[0] if squeeze else dx, dk

    return _result(y4[0] if squeeze else y4, (x, k), backward)


# ---------------------------------------------------------------------------
# activations and normalization
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, v); subgradient at 0 is 0."""
    mask = x.data > 0
    y = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g):
        return (np.where(mask, g, g.dtype.type(0)),)

    return _result(y, (x,), backward)


SIGMOID_CLAMP = 40.0


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise 1/(1+exp(-v)), input clamped to +-40 to avoid overflow."""
    v = np.clip(x.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    s = 1.0 / (1.0 + np.exp(-v))
    s = s.astype(x.dtype, copy=False)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _result(s, (x,), backward)


class BatchNormState:
    """Learned scale/shift plus running statistics for one feature axis."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, np.float32), requires_grad=True)
        self.running_mean = np.zeros(dim, np.float64)
        self.running_var = np.ones(dim, np.float64)
        self.momentum = momentum
        self.eps = eps

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def params(self):
        return [self.gamma, self.beta]


def batchnorm(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-feature standardization with learned scale/shift.

    Train mode requires a (batch, dim) input with batch >= 2 and updates the
    running statistics as a side effect; eval mode standardizes with the
    stored running statistics and accepts (dim,) or (batch, dim).
    """
    if mode not in ("train", "eval"):
        raise AutodiffError(f"batchnorm: unknown mode {mode!r}")
    _check_tensors("batchnorm", x, state.gamma, state.beta)
    dim = state.dim
    if x.shape[-1] != dim:
        raise AutodiffError(f"batchnorm: input shape {x.shape} does not match dim {dim}")
    gamma, beta = state.gamma, state.beta
    dt = x.dtype

    if mode == "train":
        if x.data.ndim != 2 or x.shape[0] < 2:
            raise AutodiffError(
                f"batchnorm: train mode needs a batch of >= 2 rows, got shape {x.shape}"
            )
        n = x.shape[0]
        mu = np.mean(x.data, axis=0, dtype=np.float64)
        var = np.mean((x.data.astype(np.float64) - mu) ** 2, axis=0)
        inv_std = (1.0 / np.sqrt(var + state.eps)).astype(dt)
        xhat = ((x.data - mu.astype(dt)) * inv_std).astype(dt)
        y = gamma.data * xhat + beta.data
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var

        def backward(g):
            dgamma = _fsum(g * xhat, axis=0)
            dbeta = _fsum(g, axis=0)
            dxhat = g * gamma.data
            dx = (
                inv_std
                / n
                * (n * dxhat - np.sum(dxhat, axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
            ).astype(dt)
            return dx, dgamma, dbeta

        return _result(y, (x, gamma, beta), backward)

    inv_std = (1.0 / np.sqrt(state.running_var + state.eps)).astype(dt)
    mu = state.running_mean.astype(dt)
    xhat = (x.data - mu) * inv_std
    y = gamma.data * xhat + beta.data

    def backward(g):
        axis = 0 if x.data.ndim == 2 else None
        dgamma = _fsum(g * xhat, axis=axis).reshape(dim)
        dbeta = _fsum(g, axis=axis).reshape(dim)
        return g * gamma.data * inv_std, dgamma, dbeta

    return _result(y, (x, gamma, beta), backward)


def _check_spans(spans, n):
    pos = 0
    for start, end in spans:
        if start != pos or end <= start:
            raise AutodiffError(f"grouped_softmax: spans must partition [0,{n}), got {spans}")
        pos = end
    if pos != n:
        raise AutodiffError(f"grouped_softmax: spans must partition [0,{n}), got {spans}")


def grouped_softmax(x: Tensor, spans) -> Tensor:
    """Softmax applied independently to each contiguous span of the last axis."""
    n = x.shape[-1]
    _check_spans(spans, n)
    y = np.empty_like(x.data)
    for start, end in spans:
        z = x.data[..., start:end]
        z = z - np.max(z, axis=-1, keepdims=True)
        e = np.exp(z)
        y[..., start:end] = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        dx = np.empty_like(g)
        for start, end in spans:
            ys = y[..., start:end]
            gs = g[..., start:end]
            inner = np.sum(gs * ys, axis=-1, keepdims=True)
            dx[..., start:end] = ys * (gs - inner)
        return (dx,)

    return _result(y, (x,), backward)


# ---------------------------------------------------------------------------
# elementwise arithmetic (identical shapes only)
# ---------------------------------------------------------------------------

def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of identically shaped tensors."""
    _check_tensors("elementwise_mul", a, b)
    _same_shape("elementwise_mul", a, b)

    def backward(g):
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), backward)


mul = elementwise_mul


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_tensors("add", a, b)
    _same_shape("add", a, b)

    def backward(g):
        return g, g

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_tensors("sub", a, b)
    _same_shape("sub", a, b)

    def backward(g):
        return g, -g

    return _result(a.data - b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a/b; a non-finite quotient is rejected at the boundary."""
    _check_tensors("div", a, b)
    _same_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = a.data / b.data

    def backward(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    return _result(y, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)

    def backward(g):
        return (g * c,)

    return _result(x.data * c, (x,), backward)


def add_scalar(x: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g,)

    return _result(x.data + x.dtype.type(c), (x,), backward)


def absolute(x: Tensor) -> Tensor:
    """|v| with subgradient 0 at the kink."""
    sign = np.sign(x.data)

    def backward(g):
        return (g * sign,)

    return _result(np.abs(x.data), (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise AutodiffError("sqrt: requires strictly positive input")
    y = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / y,)

    return _result(y, (x,), backward)


def clamp01(x: Tensor) -> Tensor:
    """Clamp to [0,1]; gradient is straight-through inside, zero outside."""
    mask = (x.data >= 0) & (x.data <= 1)

    def backward(g):
        return (np.where(mask, g, g.dtype.type(0)),)

    return _result(np.clip(x.data, 0, 1), (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    y = _fsum(x.data).reshape(1)

    def backward(g):
        return (np.full_like(x.data, g.reshape(())),)

    return _result(y, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    y = (_fsum(x.data) / x.dtype.type(n)).reshape(1)

    def backward(g):
        return (np.full_like(x.data, g.reshape(()) / x.dtype.type(n)),)

    return _result(y, (x,), backward)


def sum_last(x: Tensor) -> Tensor:
    """Row sums of a 2-d tensor: (b, n) -> (b,)."""
    if x.data.ndim != 2:
        raise AutodiffError(f"sum_last: expected 2-d input, got shape {x.shape}")
    y = _fsum(x.data, axis=1)

    def backward(g):
        return (np.repeat(g[:, None], x.shape[1], axis=1),)

    return _result(y, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise AutodiffError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), backward)


def concat(parts) -> Tensor:
    """Concatenate along the last axis; leading dimensions must agree."""
    parts = tuple(parts)
    _check_tensors("concat", *parts)
    lead = parts[0].data.shape[:-1]
    for p in parts:
        if p.data.shape[:-1] != lead:
            raise AutodiffError(
                f"concat: leading dims differ: {[tuple(p.shape) for p in parts]}"
            )
    widths = [p.shape[-1] for p in parts]
    y = np.concatenate([p.data for p in parts], axis=-1)

    def backward(g):
        out, pos = [], 0
        for wdt in widths:
            out.append(np.ascontiguousarray(g[..., pos:pos + wdt]))
            pos += wdt
        return tuple(out)

    return _result(y, parts, backward)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    if x.data.ndim == 1:
        r = float(np.sqrt(np.sum(x.data.astype(np.float64) ** 2)))
        if r < 1e-12:
            raise AutodiffError("l2_normalize: zero-norm input")
        rr = x.dtype.type(r)
        y = x.data / rr

        def backward(g):
            return ((g - y * np.sum(g * y, dtype=np.float64).astype(x.dtype)) / rr,)

        return _result(y, (x,), backward)
    if x.data.ndim == 2:
        r = np.sqrt(np.sum(x.data.astype(np.float64) ** 2, axis=1, keepdims=True))
        if np.any(r < 1e-12):
            raise AutodiffError("l2_normalize: zero-norm row")
        rr = r.astype(x.dtype)
        y = x.data / rr

        def backward(g):
            inner = np.sum(g * y, axis=1, keepdims=True, dtype=np.float64).astype(x.dtype)
            return ((g - y * inner) / rr,)

        return _result(y, (x,), backward)
    raise AutodiffError(f"l2_normalize: expected 1-d or 2-d input, got {x.shape}")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (batch, classes) logits against integer labels."""
    if logits.data.ndim != 2:
        raise AutodiffError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise AutodiffError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match batch {n}"
        )
    z = logits.data.astype(np.float64)
    z = z - np.max(z, axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    loss = -np.mean(logp[np.arange(n), labels])
    probs = np.exp(logp)

    def backward(g):
        one_hot = np.zeros((n, k), np.float64)
        one_hot[np.arange(n), labels] = 1.0
        return ((g.reshape(()) * (probs - one_hot) / n).astype(logits.dtype),)

    return _result(np.array([loss], dtype=logits.dtype), (logits,), backward)
