"""Loop kernels compiled with numba. Semantics mirror ``_numpy_kernels``."""

import numba
import numpy as np


@numba.njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@numba.njit(cache=True)
def _union(parent, a, b):
    ra = _find(parent, a)
    rb = _find(parent, b)
    if ra < rb:
        parent[rb] = ra
    elif rb < ra:
        parent[ra] = rb


@numba.njit(cache=True)
def _label8(mask):
    h, w = mask.shape
    parent = np.arange(h * w, dtype=np.int64)
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            i = r * w + c
            if c > 0 and mask[r, c - 1]:
                _union(parent, i, i - 1)
            if r > 0:
                for dc in (-1, 0, 1):
                    cc = c + dc
                    if 0 <= cc < w and mask[r - 1, cc]:
                        _union(parent, i, (r - 1) * w + cc)
    labels = np.zeros((h, w), dtype=np.int32)
    final = np.zeros(h * w, dtype=np.int32)
    n = 0
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            root = _find(parent, r * w + c)
            if final[root] == 0:
                n += 1
                final[root] = n
            labels[r, c] = final[root]
    return labels, n


def label8(mask):
    labels, n = _label8(np.ascontiguousarray(mask, dtype=np.bool_))
    return labels, int(n)


@numba.njit(cache=True)
def _otsu_bin(hist):
    nb = hist.shape[0]
    n = 0.0
    s = 0.0
    q = 0.0
    for i in range(nb):
        n += hist[i]
        s += hist[i] * i
        q += hist[i] * i * i
    best = np.inf
    best_t = -1
    c0 = 0.0
    s0 = 0.0
    q0 = 0.0
    for t in range(1, nb):
        v = hist[t - 1]
        c0 += v
        s0 += v * (t - 1)
        q0 += v * (t - 1) * (t - 1)
        c1 = n - c0
        if c0 <= 0 or c1 <= 0:
            continue
        s1 = s - s0
        q1 = q - q0
        within = (q0 - s0 * s0 / c0) + (q1 - s1 * s1 / c1)
        if within < best:
            best = within
            best_t = t
    return best_t


def otsu_bin(hist):
    return int(_otsu_bin(np.asarray(hist, dtype=np.float64)))


@numba.njit(cache=True)
def _within_tolerance(src, dst, tol2):
    out = np.zeros(src.shape[0], dtype=np.bool_)
    for i in range(src.shape[0]):
        r = src[i, 0]
        c = src[i, 1]
        for j in range(dst.shape[0]):
            dr = r - dst[j, 0]
            dc = c - dst[j, 1]
            if dr * dr + dc * dc <= tol2:
                out[i] = True
                break
    return out


def within_tolerance(src, dst_mask, tol):
    src = np.ascontiguousarray(np.asarray(src, dtype=np.int64).reshape(-1, 2))
    dst = np.ascontiguousarray(np.argwhere(np.asarray(dst_mask, dtype=bool)).astype(np.int64))
    return _within_tolerance(src, dst, float(tol) * float(tol))


@numba.njit(cache=True)
def _im2row(x, k):
    # (N*H*W, C*k*k) matrix of zero-padded patches, one row per output pixel
    n_, c_, h, wd = x.shape
    p = k // 2
    rows = np.zeros((n_ * h * wd, c_ * k * k))
    for n in range(n_):
        for i in range(h):
            for j in range(wd):
                r = (n * h + i) * wd + j
                for c in range(c_):
                    for di in range(k):
                        ii = i + di - p
                        if ii < 0 or ii >= h:
                            continue
                        for dj in range(k):
                            jj = j + dj - p
                            if 0 <= jj < wd:
                                rows[r, (c * k + di) * k + dj] = x[n, c, ii, jj]
    return rows


@numba.njit(cache=True)
def _row2im(rows, n_, c_, h, wd, k):
    p = k // 2
    x = np.zeros((n_, c_, h, wd))
    for n in range(n_):
        for i in range(h):
            for j in range(wd):
                r = (n * h + i) * wd + j
                for c in range(c_):
                    for di in range(k):
                        ii = i + di - p
                        if ii < 0 or ii >= h:
                            continue
                        for dj in range(k):
                            jj = j + dj - p
                            if 0 <= jj < wd:
                                x[n, c, ii, jj] += rows[r, (c * k + di) * k + dj]
    return x


@numba.njit(cache=True)
def _conv2d_forward(x, w, b):
    n_, c_, h, wd = x.shape
    o_, _, k, _ = w.shape
    out = np.dot(_im2row(x, k), np.ascontiguousarray(w.reshape(o_, c_ * k * k).T))  # (N*H*W, O)
    y = np.empty((n_, o_, h, wd))
    for n in range(n_):
        for i in range(h):
            for j in range(wd):
                r = (n * h + i) * wd + j
                for o in range(o_):
                    y[n, o, i, j] = out[r, o] + b[o]
    return y


@numba.njit(cache=True)
def _conv2d_backward(x, w, dy):
    n_, c_, h, wd = x.shape
    o_, _, k, _ = w.shape
    g = np.empty((n_ * h * wd, o_))
    for n in range(n_):
        for i in range(h):
            for j in range(wd):
                r = (n * h + i) * wd + j
                for o in range(o_):
                    g[r, o] = dy[n, o, i, j]
    rows = _im2row(x, k)
    dw = np.dot(np.ascontiguousarray(g.T), rows).reshape(o_, c_, k, k)
    db = g.sum(axis=0)
    drows = np.dot(g, np.ascontiguousarray(w.reshape(o_, c_ * k * k)))
    return _row2im(drows, n_, c_, h, wd, k), dw, db


def conv2d_forward(x, w, b):
    return _conv2d_forward(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(b, dtype=np.float64),
    )


def conv2d_backward(x, w, dy):
    return _conv2d_backward(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(dy, dtype=np.float64),
    )
