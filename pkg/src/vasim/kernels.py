"""
Hot loops of the CNN observer: valid 2-D convolution and 2x2 max pooling,
forward and backward.

Two interchangeable implementations exist.  The numba one is explicit loops
compiled with ``@njit``; the numpy one is im2col + BLAS via
``sliding_window_view``/``tensordot``.  The backend is picked once from the
``VASIM_BACKEND`` environment variable (``numba`` or ``numpy``; default
``numba`` when it imports) and can be switched at runtime with
:func:`set_backend`.  Both paths are dtype-generic (float32 for training,
float64 for gradient checks).

Array layout is NCHW: ``x`` is (batch, channels, height, width) and conv
weights are (filters, channels, k, k).
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
    from numba import njit, prange
    HAVE_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # skip probing the system TBB, which is often too old and warns
        numba.config.THREADING_LAYER = "omp"
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

BACKENDS = ("numba", "numpy")

# im2col chunk for the numpy path; bounds peak memory of the patch matrix
_CHUNK = 8


def _initial_backend() -> str:
    name = os.environ.get("VASIM_BACKEND", "").strip().lower()
    if name in ("", "auto"):
        return "numba" if HAVE_NUMBA else "numpy"
    if name not in BACKENDS:
        raise ValueError(f"VASIM_BACKEND must be one of {BACKENDS}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise ImportError("VASIM_BACKEND=numba but numba is not installed")
    return name


_backend = _initial_backend()


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Select the kernel backend; returns the previous one."""
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise ImportError("numba is not installed")
    prev, _backend = _backend, name
    return prev


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def _np_conv_forward(x, w, b):
    k = w.shape[2]
    bsz, _, h, wd = x.shape
    out = np.empty((bsz, w.shape[0], h - k + 1, wd - k + 1), dtype=x.dtype)
    for s in range(0, bsz, _CHUNK):
        win = sliding_window_view(x[s:s + _CHUNK], (k, k), axis=(2, 3))
        y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))   # (b, ho, wo, f)
        out[s:s + _CHUNK] = y.transpose(0, 3, 1, 2)
    out += b[None, :, None, None]
    return out


def _np_conv_backward(x, w, dy, need_dx):
    k = w.shape[2]
    bsz = x.shape[0]
    db = dy.sum(axis=(0, 2, 3))
    dw = np.zeros_like(w)
    dx = np.empty_like(x) if need_dx else None
    wf = w[:, :, ::-1, ::-1]
    for s in range(0, bsz, _CHUNK):
        xs, dys = x[s:s + _CHUNK], dy[s:s + _CHUNK]
        win = sliding_window_view(xs, (k, k), axis=(2, 3))
        dw += np.tensordot(dys, win, axes=([0, 2, 3], [0, 2, 3]))
        if need_dx:
            pad = np.pad(dys, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
            dwin = sliding_window_view(pad, (k, k), axis=(2, 3))
            g = np.tensordot(dwin, wf, axes=([1, 4, 5], [0, 2, 3]))   # (b, h, w, c)
            dx[s:s + _CHUNK] = g.transpose(0, 3, 1, 2)
    return dx, dw, db


def _np_maxpool(x):
    bsz, c, h, w = x.shape
    blocks = (x[:, :, :h // 2 * 2, :w // 2 * 2]
              .reshape(bsz, c, h // 2, 2, w // 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(bsz, c, h // 2, w // 2, 4))
    idx = blocks.argmax(axis=-1).astype(np.int8)
    y = np.take_along_axis(blocks, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return y, idx


def _np_maxpool_backward(dy, idx, in_shape):
    bsz, c, h, w = in_shape
    ho, wo = dy.shape[2], dy.shape[3]
    onehot = (idx[..., None] == np.arange(4, dtype=np.int8)) * dy[..., None]
    dx = np.zeros(in_shape, dtype=dy.dtype)
    dx[:, :, :ho * 2, :wo * 2] = (onehot.reshape(bsz, c, ho, wo, 2, 2)
                                  .transpose(0, 1, 2, 4, 3, 5)
                                  .reshape(bsz, c, ho * 2, wo * 2))
    return dx


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(parallel=True, fastmath=True, cache=True)
    def _nb_conv_forward(x, w, b, out):
        bsz, cin, _, _ = x.shape
        nf, _, k, _ = w.shape
        ho, wo = out.shape[2], out.shape[3]
        for job in prange(bsz * nf):
            n = job // nf
            f = job % nf
            for r in range(ho):
                orow = out[n, f, r]
                for s in range(wo):
                    orow[s] = b[f]
                for c in range(cin):
                    for i in range(k):
                        xrow = x[n, c, r + i]
                        for j in range(k):
                            wv = w[f, c, i, j]
                            for s in range(wo):
                                orow[s] += wv * xrow[s + j]

    @njit(parallel=True, fastmath=True, cache=True)
    def _nb_conv_grad_w(x, dy, dw, db):
        bsz, cin, _, _ = x.shape
        nf, _, k, _ = dw.shape
        ho, wo = dy.shape[2], dy.shape[3]
        zero = dy.dtype.type(0)
        for f in prange(nf):
            acc = np.zeros((cin, k, k), dtype=dw.dtype)
            acc_b = zero
            for n in range(bsz):
                for r in range(ho):
                    dyrow = dy[n, f, r]
                    for s in range(wo):
                        acc_b += dyrow[s]
                    for c in range(cin):
                        for i in range(k):
                            xrow = x[n, c, r + i]
                            for j in range(k):
                                t = zero
                                for s in range(wo):
                                    t += dyrow[s] * xrow[s + j]
                                acc[c, i, j] += t
            db[f] = acc_b
            dw[f] = acc

    @njit(parallel=True, fastmath=True, cache=True)
    def _nb_conv_grad_x(w, dy, dx):
        bsz, cin = dx.shape[0], dx.shape[1]
        nf, _, k, _ = w.shape
        ho, wo = dy.shape[2], dy.shape[3]
        for n in prange(bsz):
            dx[n] = 0.0
            for f in range(nf):
                for r in range(ho):
                    dyrow = dy[n, f, r]
                    for c in range(cin):
                        for i in range(k):
                            dxrow = dx[n, c, r + i]
                            for j in range(k):
                                wv = w[f, c, i, j]
                                for s in range(wo):
                                    dxrow[s + j] += wv * dyrow[s]

    @njit(parallel=True, cache=True)
    def _nb_maxpool(x, y, idx):
        bsz, c = x.shape[0], x.shape[1]
        ho, wo = y.shape[2], y.shape[3]
        for job in prange(bsz * c):
            n = job // c
            ch = job % c
            for r in range(ho):
                for s in range(wo):
                    best = x[n, ch, 2 * r, 2 * s]
                    arg = 0
                    for q in range(1, 4):
                        v = x[n, ch, 2 * r + q // 2, 2 * s + q % 2]
                        if v > best:
                            best = v
                            arg = q
                    y[n, ch, r, s] = best
                    idx[n, ch, r, s] = arg

    @njit(parallel=True, cache=True)
    def _nb_maxpool_backward(dy, idx, dx):
        bsz, c = dy.shape[0], dy.shape[1]
        ho, wo = dy.shape[2], dy.shape[3]
        for job in prange(bsz * c):
            n = job // c
            ch = job % c
            dx[n, ch] = 0.0
            for r in range(ho):
                for s in range(wo):
                    q = idx[n, ch, r, s]
                    dx[n, ch, 2 * r + q // 2, 2 * s + q % 2] = dy[n, ch, r, s]


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid cross-correlation, stride 1: (B,C,H,W) -> (B,F,H-k+1,W-k+1)."""
    if _backend == "numpy":
        return _np_conv_forward(x, w, b)
    k = w.shape[2]
    out = np.empty((x.shape[0], w.shape[0], x.shape[2] - k + 1, x.shape[3] - k + 1), dtype=x.dtype)
    _nb_conv_forward(np.ascontiguousarray(x), np.ascontiguousarray(w), b.astype(x.dtype), out)
    return out


def conv_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray, need_dx: bool = True):
    """Gradients ``(dx, dw, db)`` of :func:`conv_forward`; ``dx`` is None unless requested."""
    if _backend == "numpy":
        return _np_conv_backward(x, w, dy, need_dx)
    x = np.ascontiguousarray(x)
    dy = np.ascontiguousarray(dy)
    dw = np.empty_like(w)
    db = np.empty(w.shape[0], dtype=w.dtype)
    _nb_conv_grad_w(x, dy, dw, db)
    dx = None
    if need_dx:
        dx = np.empty_like(x)
        _nb_conv_grad_x(np.ascontiguousarray(w), dy, dx)
    return dx, dw, db


def maxpool_forward(x: np.ndarray):
    """2x2/stride-2 max pooling; returns (pooled, argmax-in-window as int8)."""
    if _backend == "numpy":
        return _np_maxpool(x)
    bsz, c, h, w = x.shape
    y = np.empty((bsz, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty(y.shape, dtype=np.int8)
    _nb_maxpool(np.ascontiguousarray(x), y, idx)
    return y, idx


def maxpool_backward(dy: np.ndarray, idx: np.ndarray, in_shape) -> np.ndarray:
    if _backend == "numpy":
        return _np_maxpool_backward(dy, idx, tuple(in_shape))
    dx = np.empty(tuple(in_shape), dtype=dy.dtype)
    _nb_maxpool_backward(np.ascontiguousarray(dy), idx, dx)
    return dx
