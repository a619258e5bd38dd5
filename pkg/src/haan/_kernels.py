"""Hot inner loops with a numba path and a pure-numpy fallback.

The backend is chosen once at import from ``HAAN_NUMBA`` ("0" forces numpy,
anything else uses numba when it imports). :func:`set_backend` switches at
runtime, which the benchmark and the parity tests rely on.

All kernels take and return plain ndarrays; autodiff lives in ``tensor``.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# TBB on this class of hosts is often too old and warns; workqueue is always present.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_backend = "numba" if HAVE_NUMBA and os.environ.get("HAAN_NUMBA", "1") != "0" else "numpy"


def backend():
    return _backend


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels; returns the previous name."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    prev, _backend = _backend, name
    return prev


def set_threads(n):
    """Cap numba and BLAS worker threads; ``n == 0`` leaves defaults alone."""
    if n <= 0:
        return
    if HAVE_NUMBA:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    from threadpoolctl import threadpool_limits

    threadpool_limits(n)


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _np_im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, K, K) -> (C, K, K, N, Ho, Wo)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)


def _np_col2im(cols, n, c, hp, wp, k, stride, ho, wo):
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(c, k, k, n, ho, wo)
    he = (ho - 1) * stride + 1
    we = (wo - 1) * stride + 1
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + he : stride, kj : kj + we : stride] += cols6[:, ki, kj].transpose(1, 0, 2, 3)
    return out


def _np_maxpool(x, k, stride, ho, wo):
    n, c = x.shape[:2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def _np_maxpool_backward(g, idx, h, w, k, stride):
    n, c, ho, wo = g.shape
    out = np.zeros((n, c, h, w), dtype=g.dtype)
    ki, kj = np.divmod(idx, k)
    rows = np.arange(ho)[None, None, :, None] * stride + ki
    cols = np.arange(wo)[None, None, None, :] * stride + kj
    nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(out, (nn_[:, :, None, None], cc[:, :, None, None], rows, cols), g)
    return out


def _np_min_filter(img, size):
    r = size // 2
    padded = np.pad(img, ((r, size - 1 - r), (r, size - 1 - r)), mode="constant", constant_values=np.inf)
    return sliding_window_view(padded, (size, size)).min(axis=(-2, -1))


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _nb_im2col(xp, k, stride, ho, wo):
        n, c = xp.shape[0], xp.shape[1]
        cols = np.empty((c * k * k, n * ho * wo), dtype=xp.dtype)
        for ch in prange(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ch * k + ki) * k + kj
                    for b in range(n):
                        base = b * ho * wo
                        for i in range(ho):
                            src = xp[b, ch, i * stride + ki]
                            off = base + i * wo
                            for j in range(wo):
                                cols[row, off + j] = src[j * stride + kj]
        return cols

    @njit(cache=True, parallel=True)
    def _nb_col2im(cols, n, c, hp, wp, k, stride, ho, wo):
        out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
        for ch in prange(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ch * k + ki) * k + kj
                    for b in range(n):
                        base = b * ho * wo
                        for i in range(ho):
                            dst = out[b, ch, i * stride + ki]
                            off = base + i * wo
                            for j in range(wo):
                                dst[j * stride + kj] += cols[row, off + j]
        return out

    @njit(cache=True)
    def _nb_maxpool(x, k, stride, ho, wo):
        n, c = x.shape[0], x.shape[1]
        out = np.empty((n, c, ho, wo), dtype=x.dtype)
        idx = np.empty((n, c, ho, wo), dtype=np.int64)
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        best = x[b, ch, i * stride, j * stride]
                        arg = 0
                        for ki in range(k):
                            for kj in range(k):
                                v = x[b, ch, i * stride + ki, j * stride + kj]
                                if v > best:
                                    best = v
                                    arg = ki * k + kj
                        out[b, ch, i, j] = best
                        idx[b, ch, i, j] = arg
        return out, idx

    @njit(cache=True)
    def _nb_maxpool_backward(g, idx, h, w, k, stride):
        n, c, ho, wo = g.shape
        out = np.zeros((n, c, h, w), dtype=g.dtype)
        for b in range(n):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        a = idx[b, ch, i, j]
                        out[b, ch, i * stride + a // k, j * stride + a % k] += g[b, ch, i, j]
        return out

    @njit(cache=True)
    def _nb_min_filter(img, size):
        h, w = img.shape
        r = size // 2
        # separable: running min along rows, then along columns
        tmp = np.empty_like(img)
        for i in range(h):
            for j in range(w):
                lo = max(0, j - r)
                hi = min(w, j - r + size)
                m = img[i, lo]
                for jj in range(lo + 1, hi):
                    if img[i, jj] < m:
                        m = img[i, jj]
                tmp[i, j] = m
        out = np.empty_like(img)
        for j in range(w):
            for i in range(h):
                lo = max(0, i - r)
                hi = min(h, i - r + size)
                m = tmp[lo, j]
                for ii in range(lo + 1, hi):
                    if tmp[ii, j] < m:
                        m = tmp[ii, j]
                out[i, j] = m
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def im2col(xp, k, stride, ho, wo):
    """Unfold padded NCHW input to a ``(C*K*K, N*Ho*Wo)`` matrix."""
    if _backend == "numba":
        return _nb_im2col(np.ascontiguousarray(xp), k, stride, ho, wo)
    return _np_im2col(xp, k, stride, ho, wo)


def col2im(cols, n, c, hp, wp, k, stride, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add columns back to padded NCHW."""
    if _backend == "numba":
        return _nb_col2im(np.ascontiguousarray(cols), n, c, hp, wp, k, stride, ho, wo)
    return _np_col2im(cols, n, c, hp, wp, k, stride, ho, wo)


def maxpool(x, k, stride, ho, wo):
    if _backend == "numba":
        return _nb_maxpool(np.ascontiguousarray(x), k, stride, ho, wo)
    return _np_maxpool(x, k, stride, ho, wo)


def maxpool_backward(g, idx, h, w, k, stride):
    if _backend == "numba":
        return _nb_maxpool_backward(np.ascontiguousarray(g), idx, h, w, k, stride)
    return _np_maxpool_backward(g, idx, h, w, k, stride)


def min_filter(img, size):
    """Square-window minimum of a 2-D array; the window is clipped at borders."""
    img = np.asarray(img, dtype=np.float64)
    if _backend == "numba":
        return _nb_min_filter(np.ascontiguousarray(img), size)
    return _np_min_filter(img, size)
