"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures, same results. Used when the extension is not built or
when ``POINTGPT_NN_PURE=1`` is set.
"""
import numpy as np


def _sqdist(pts, c):
    d = pts - c
    return (d * d).sum(axis=-1)


def fps(pts, n, start):
    N = pts.shape[0]
    out = np.empty(n, dtype=np.int64)
    mind = np.full(N, np.inf)
    cur = start
    for i in range(n):
        out[i] = cur
        mind[cur] = -1.0
        if i == n - 1:
            break
        np.minimum(mind, np.where(mind >= 0.0, _sqdist(pts, pts[cur]), -1.0), out=mind)
        cur = int(np.argmax(mind))
    return out


def knn(pts, queries, k, chunk=256):
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for s in range(0, queries.shape[0], chunk):
        q = queries[s:s + chunk]
        d = _sqdist(pts[None, :, :], q[:, None, :])
        out[s:s + chunk] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def nearest_sq(P, Q):
    d = _sqdist(P[:, :, None, :], Q[:, None, :, :])
    idx = np.argmin(d, axis=2)
    return np.take_along_axis(d, idx[:, :, None], axis=2)[:, :, 0], idx.astype(np.int64)


def _spread3(v):
    v = v & np.uint64(0x1FFFFF)
    for shift, mask in ((32, 0x1F00000000FFFF), (16, 0x1F0000FF0000FF),
                        (8, 0x100F00F00F00F00F), (4, 0x10C30C30C30C30C3),
                        (2, 0x1249249249249249)):
        v = (v | (v << np.uint64(shift))) & np.uint64(mask)
    return v


def morton_interleave(q):
    return (_spread3(q[:, 0]) | (_spread3(q[:, 1]) << np.uint64(1))
            | (_spread3(q[:, 2]) << np.uint64(2)))
