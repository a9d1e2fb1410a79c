"""Vectorized numpy/scipy implementations of the hot kernels.

These are the reference path: always importable, used when numba is
missing or disabled through ``PROMPTSEG_DISABLE_NUMBA``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

_EIGHT = np.ones((3, 3), dtype=bool)


def label8(mask):
    """8-connected labeling, labels numbered by raster order of first pixel."""
    mask = np.ascontiguousarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return labels.astype(np.int32), 0
    flat = labels.ravel()
    fg = np.flatnonzero(flat)
    ids, first = np.unique(flat[fg], return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[ids[order]] = np.arange(1, n + 1, dtype=np.int32)
    return remap[labels], int(n)


def otsu_bin(hist):
    """Return the bin index t minimizing w0*var0 + w1*var1 (class 1 = bins >= t).

    Returns -1 when no split leaves both classes non-empty.
    """
    hist = np.asarray(hist, dtype=np.float64)
    nb = hist.shape[0]
    idx = np.arange(nb, dtype=np.float64)
    n = hist.sum()
    c0 = np.cumsum(hist)[:-1]
    s0 = np.cumsum(hist * idx)[:-1]
    q0 = np.cumsum(hist * idx * idx)[:-1]
    c1 = n - c0
    s1 = hist @ idx - s0
    q1 = hist @ (idx * idx) - q0
    valid = (c0 > 0) & (c1 > 0)
    if not valid.any():
        return -1
    with np.errstate(divide="ignore", invalid="ignore"):
        # n_k * var_k = sum(x^2) - sum(x)^2 / n_k
        within = (q0 - s0 * s0 / c0) + (q1 - s1 * s1 / c1)
    within = np.where(valid, within, np.inf)
    return int(np.argmin(within)) + 1


def within_tolerance(src, dst_mask, tol):
    """For each (row, col) in ``src``, whether some ``dst_mask`` pixel lies within ``tol``."""
    src = np.asarray(src, dtype=np.int64).reshape(-1, 2)
    if src.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    dst_mask = np.asarray(dst_mask, dtype=bool)
    if not dst_mask.any():
        return np.zeros(src.shape[0], dtype=bool)
    dist = ndimage.distance_transform_edt(~dst_mask)
    return dist[src[:, 0], src[:, 1]] <= tol


def conv2d_forward(x, w, b):
    """Same-padded stride-1 convolution. x: (N, C, H, W), w: (O, C, K, K)."""
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    y = np.einsum("nchwkl,ockl->nohw", win, w, optimize=True)
    return y + b[None, :, None, None]


def conv2d_backward(x, w, dy):
    """Gradients (dx, dw, db) of :func:`conv2d_forward`."""
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    dw = np.einsum("nohw,nchwkl->ockl", dy, win, optimize=True)
    db = dy.sum(axis=(0, 2, 3))
    q = k - 1 - p
    dyp = np.pad(dy, ((0, 0), (0, 0), (q, q), (q, q)))
    dwin = sliding_window_view(dyp, (k, k), axis=(2, 3))
    dx = np.einsum("nohwkl,ockl->nchw", dwin, w[:, :, ::-1, ::-1], optimize=True)
    return dx, dw, db
