"""Hot 3x3 convolution kernels: numba-jitted loops with a pure-numpy fallback.

The backend is chosen once at import time from the FACEFORGE_KERNELS
environment variable:

    FACEFORGE_KERNELS=auto   # default: numba if importable, else numpy
    FACEFORGE_KERNELS=numba  # force numba (ImportError if unavailable)
    FACEFORGE_KERNELS=numpy  # force the pure-numpy path

All kernels are deterministic (no threading, no fastmath) and operate on
4-d arrays: input (b, c, h, w), kernels (k, c, 3, 3). Padding is fixed at
1, stride is 1 or 2. The numpy path uses shift-and-tensordot over the nine
kernel taps; the numba path uses direct loops with float64 accumulators.
Run ``python benchmarks/bench_kernels.py`` to compare the two.
"""

import os

import numpy as np

_CHOICE = os.environ.get("FACEFORGE_KERNELS", "auto").strip().lower()
if _CHOICE not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"FACEFORGE_KERNELS must be auto, numba or numpy, got {_CHOICE!r}"
    )

_HAVE_NUMBA = False
if _CHOICE in ("auto", "numba"):
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:
        if _CHOICE == "numba":
            raise

BACKEND = "numba" if _HAVE_NUMBA else "numpy"


def out_size(n, stride):
    """Output edge length for a 3x3 kernel, padding 1, given stride."""
    return (n + 2 - 3) // stride + 1


# ---------------------------------------------------------------------------
# pure-numpy path: nine shifted views, contracted with tensordot (BLAS)
# ---------------------------------------------------------------------------

def _pad(x):
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    return xp


def _conv2d_forward_numpy(x, k, stride):
    b, c, h, w = x.shape
    ho, wo = out_size(h, stride), out_size(w, stride)
    xp = _pad(x)
    y = np.zeros((b, k.shape[0], ho, wo), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            view = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
            # (b,c,ho,wo) x (k,c) -> (b,ho,wo,k)
            y += np.tensordot(view, k[:, :, di, dj], axes=([1], [1])).transpose(0, 3, 1, 2)
    return y


def _conv2d_backward_input_numpy(g, k, stride, h, w):
    b = g.shape[0]
    c = k.shape[1]
    ho, wo = g.shape[2], g.shape[3]
    dxp = np.zeros((b, c, h + 2, w + 2), dtype=g.dtype)
    for di in range(3):
        for dj in range(3):
            # (b,ko,ho,wo) x (ko,c) -> (b,ho,wo,c)
            t = np.tensordot(g, k[:, :, di, dj], axes=([1], [0])).transpose(0, 3, 1, 2)
            dxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += t
    return np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1])


def _conv2d_backward_kernels_numpy(g, x, stride):
    b, c, h, w = x.shape
    ko = g.shape[1]
    ho, wo = g.shape[2], g.shape[3]
    xp = _pad(x)
    dk = np.zeros((ko, c, 3, 3), dtype=g.dtype)
    for di in range(3):
        for dj in range(3):
            view = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
            # contract over b, ho, wo
            dk[:, :, di, dj] = np.tensordot(g, view, axes=([0, 2, 3], [0, 2, 3]))
    return dk


# ---------------------------------------------------------------------------
# numba path: direct loops, float64 accumulation
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _conv2d_forward_numba(x, k, stride, y):
        b, c, h, w = x.shape
        ko = k.shape[0]
        ho, wo = y.shape[2], y.shape[3]
        for n in range(b):
            for o in range(ko):
                for oi in range(ho):
                    for oj in range(wo):
                        acc = 0.0
                        ci = oi * stride - 1
                        cj = oj * stride - 1
                        for ch in range(c):
                            for di in range(3):
                                ii = ci + di
                                if ii < 0 or ii >= h:
                                    continue
                                for dj in range(3):
                                    jj = cj + dj
                                    if jj < 0 or jj >= w:
                                        continue
                                    acc += x[n, ch, ii, jj] * k[o, ch, di, dj]
                        y[n, o, oi, oj] = acc

    @njit(cache=True)
    def _conv2d_backward_input_numba(g, k, stride, dx):
        b, c, h, w = dx.shape
        ko = k.shape[0]
        ho, wo = g.shape[2], g.shape[3]
        for n in range(b):
            for o in range(ko):
                for oi in range(ho):
                    for oj in range(wo):
                        gv = g[n, o, oi, oj]
                        ci = oi * stride - 1
                        cj = oj * stride - 1
                        for ch in range(c):
                            for di in range(3):
                                ii = ci + di
                                if ii < 0 or ii >= h:
                                    continue
                                for dj in range(3):
                                    jj = cj + dj
                                    if jj < 0 or jj >= w:
                                        continue
                                    dx[n, ch, ii, jj] += gv * k[o, ch, di, dj]

    @njit(cache=True)
    def _conv2d_backward_kernels_numba(g, x, stride, dk):
        b, c, h, w = x.shape
        ko = g.shape[1]
        ho, wo = g.shape[2], g.shape[3]
        for o in range(ko):
            for ch in range(c):
                for di in range(3):
                    for dj in range(3):
                        acc = 0.0
                        for n in range(b):
                            for oi in range(ho):
                                ii = oi * stride - 1 + di
                                if ii < 0 or ii >= h:
                                    continue
                                for oj in range(wo):
                                    jj = oj * stride - 1 + dj
                                    if jj < 0 or jj >= w:
                                        continue
                                    acc += g[n, o, oi, oj] * x[n, ch, ii, jj]
                        dk[o, ch, di, dj] = acc


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------

def conv2d_forward(x, k, stride):
    """Cross-correlate (b,c,h,w) with (ko,c,3,3), padding 1."""
    b, c, h, w = x.shape
    ho, wo = out_size(h, stride), out_size(w, stride)
    if BACKEND == "numba":
        y = np.empty((b, k.shape[0], ho, wo), dtype=x.dtype)
        _conv2d_forward_numba(x, k, stride, y)
        return y
    return _conv2d_forward_numpy(x, k, stride)


def conv2d_backward_input(g, k, stride, h, w):
    """Gradient of conv2d_forward w.r.t. its input, shape (b,c,h,w)."""
    if BACKEND == "numba":
        dx = np.zeros((g.shape[0], k.shape[1], h, w), dtype=g.dtype)
        _conv2d_backward_input_numba(g, k, stride, dx)
        return dx
    return _conv2d_backward_input_numpy(g, k, stride, h, w)


def conv2d_backward_kernels(g, x, stride):
    """Gradient of conv2d_forward w.r.t. the kernel bank, shape (ko,c,3,3)."""
    if BACKEND == "numba":
        dk = np.empty((g.shape[1], x.shape[1], 3, 3), dtype=g.dtype)
        _conv2d_backward_kernels_numba(g, x, stride, dk)
        return dk
    return _conv2d_backward_kernels_numpy(g, x, stride)
