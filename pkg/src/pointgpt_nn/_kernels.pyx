# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled geometry kernels.

Every routine here has a numpy twin in ``_fallback.py`` and must return
identical results, bit for bit. Distances are accumulated as
``dx*dx + dy*dy + dz*dz`` in that order; build without fast-math or FMA
contraction so the rounding matches numpy.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def fps(const double[:, ::1] pts, Py_ssize_t n, Py_ssize_t start):
    cdef Py_ssize_t N = pts.shape[0]
    cdef Py_ssize_t i, j, cur = start, besti
    cdef double cx, cy, cz, dx, dy, dz, d, best
    out = np.empty(n, dtype=np.int64)
    mind = np.full(N, INFINITY, dtype=np.float64)
    cdef cnp.int64_t[::1] o = out
    cdef double[::1] md = mind
    for i in range(n):
        o[i] = cur
        md[cur] = -1.0
        if i == n - 1:
            break
        cx = pts[cur, 0]
        cy = pts[cur, 1]
        cz = pts[cur, 2]
        best = -2.0
        besti = 0
        for j in range(N):
            if md[j] >= 0.0:
                dx = pts[j, 0] - cx
                dy = pts[j, 1] - cy
                dz = pts[j, 2] - cz
                d = dx * dx + dy * dy + dz * dz
                if d < md[j]:
                    md[j] = d
            if md[j] > best:
                best = md[j]
                besti = j
        cur = besti
    return out


def knn(const double[:, ::1] pts, const double[:, ::1] queries, Py_ssize_t k):
    cdef Py_ssize_t N = pts.shape[0], Q = queries.shape[0]
    cdef Py_ssize_t q, j, filled, pos
    cdef double qx, qy, qz, dx, dy, dz, d
    out = np.empty((Q, k), dtype=np.int64)
    bestd_arr = np.empty(k, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] o = out
    cdef double[::1] bd = bestd_arr
    for q in range(Q):
        qx = queries[q, 0]
        qy = queries[q, 1]
        qz = queries[q, 2]
        filled = 0
        for j in range(N):
            dx = pts[j, 0] - qx
            dy = pts[j, 1] - qy
            dz = pts[j, 2] - qz
            d = dx * dx + dy * dy + dz * dz
            if filled == k and d >= bd[k - 1]:
                continue
            # stable insertion: equal distances keep the earlier index first
            pos = filled if filled < k else k - 1
            while pos > 0 and bd[pos - 1] > d:
                if pos < k:
                    bd[pos] = bd[pos - 1]
                    o[q, pos] = o[q, pos - 1]
                pos -= 1
            bd[pos] = d
            o[q, pos] = j
            if filled < k:
                filled += 1
    return out


def nearest_sq(const double[:, :, ::1] P, const double[:, :, ::1] Q):
    """Batched one-directional nearest neighbour: for each P[m, a] the
    squared distance to, and index of, the closest point in Q[m]."""
    cdef Py_ssize_t M = P.shape[0], A = P.shape[1], B = Q.shape[1]
    cdef Py_ssize_t m, a, b, bi
    cdef double px, py, pz, dx, dy, dz, d, best
    dist = np.empty((M, A), dtype=np.float64)
    idx = np.empty((M, A), dtype=np.int64)
    cdef double[:, ::1] dv = dist
    cdef cnp.int64_t[:, ::1] iv = idx
    for m in range(M):
        for a in range(A):
            px = P[m, a, 0]
            py = P[m, a, 1]
            pz = P[m, a, 2]
            best = INFINITY
            bi = 0
            for b in range(B):
                dx = px - Q[m, b, 0]
                dy = py - Q[m, b, 1]
                dz = pz - Q[m, b, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < best:
                    best = d
                    bi = b
            dv[m, a] = best
            iv[m, a] = bi
    return dist, idx


cdef inline cnp.uint64_t _spread3(cnp.uint64_t v) nogil:
    v &= 0x1FFFFFULL
    v = (v | (v << 32)) & 0x1F00000000FFFFULL
    v = (v | (v << 16)) & 0x1F0000FF0000FFULL
    v = (v | (v << 8)) & 0x100F00F00F00F00FULL
    v = (v | (v << 4)) & 0x10C30C30C30C30C3ULL
    v = (v | (v << 2)) & 0x1249249249249249ULL
    return v


def morton_interleave(const cnp.uint64_t[:, ::1] q):
    cdef Py_ssize_t n = q.shape[0], i
    out = np.empty(n, dtype=np.uint64)
    cdef cnp.uint64_t[::1] o = out
    for i in range(n):
        o[i] = _spread3(q[i, 0]) | (_spread3(q[i, 1]) << 1) | (_spread3(q[i, 2]) << 2)
    return out
