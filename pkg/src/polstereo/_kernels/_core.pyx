# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled SGM aggregation and ternary min-sum message kernels."""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()

cdef int[8][2] _DIRS = [[1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [-1, -1], [1, -1], [-1, 1]]


cdef inline void _step(const int* prev, const int* cost, int* out, int D, int P1, int P2) noexcept nogil:
    cdef int d, m = prev[0], v
    for d in range(1, D):
        if prev[d] < m:
            m = prev[d]
    for d in range(D):
        v = prev[d]
        if d > 0 and prev[d - 1] + P1 < v:
            v = prev[d - 1] + P1
        if d < D - 1 and prev[d + 1] + P1 < v:
            v = prev[d + 1] + P1
        if m + P2 < v:
            v = m + P2
        out[d] = cost[d] + v - m


def sgm_aggregate(cost, int P1, int P2):
    cdef cnp.ndarray[cnp.int32_t, ndim=3, mode="c"] C = np.ascontiguousarray(cost, dtype=np.int32)
    cdef int H = C.shape[0], W = C.shape[1], D = C.shape[2]
    cdef cnp.ndarray[cnp.int32_t, ndim=3, mode="c"] total = np.zeros((H, W, D), dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=3, mode="c"] L = np.empty((H, W, D), dtype=np.int32)
    cdef int* Cp = <int*> C.data
    cdef int* Lp = <int*> L.data
    cdef int* Tp = <int*> total.data
    cdef int k, dx, dy, x, y, px, py, d, i, step
    cdef Py_ssize_t off, poff
    with nogil:
        for k in range(8):
            dx = _DIRS[k][0]
            dy = _DIRS[k][1]
            if dx != 0:
                for step in range(W):
                    x = step if dx > 0 else W - 1 - step
                    px = x - dx
                    for y in range(H):
                        py = y - dy
                        off = (<Py_ssize_t> y * W + x) * D
                        if step == 0 or py < 0 or py >= H:
                            for d in range(D):
                                Lp[off + d] = Cp[off + d]
                        else:
                            poff = (<Py_ssize_t> py * W + px) * D
                            _step(Lp + poff, Cp + off, Lp + off, D, P1, P2)
            else:
                for step in range(H):
                    y = step if dy > 0 else H - 1 - step
                    py = y - dy
                    for x in range(W):
                        off = (<Py_ssize_t> y * W + x) * D
                        if step == 0:
                            for d in range(D):
                                Lp[off + d] = Cp[off + d]
                        else:
                            poff = (<Py_ssize_t> py * W + x) * D
                            _step(Lp + poff, Cp + off, Lp + off, D, P1, P2)
            for i in range(H * W * D):
                Tp[i] += Lp[i]
    return total


def ternary_messages(tables, q0, q1, q2, int num_threads=1):
    cdef cnp.ndarray[cnp.float64_t, ndim=4, mode="c"] tab = np.ascontiguousarray(tables, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] a0 = np.ascontiguousarray(q0, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] a1 = np.ascontiguousarray(q1, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] a2 = np.ascontiguousarray(q2, dtype=np.float64)
    cdef Py_ssize_t T = a0.shape[0]
    cdef int S = a0.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=3, mode="c"] out = np.empty((T, 3, S), dtype=np.float64)
    cdef double[:, :, :, ::1] tv = tab
    cdef double[:, ::1] v0 = a0
    cdef double[:, ::1] v1 = a1
    cdef double[:, ::1] v2 = a2
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t t
    cdef int i, j, k
    cdef double v, ta, tb, m0, m1, m2
    for t in prange(T, nogil=True, schedule="static", num_threads=num_threads):
        for i in range(S):
            ov[t, 0, i] = 1e300
            ov[t, 1, i] = 1e300
            ov[t, 2, i] = 1e300
        for i in range(S):
            for j in range(S):
                for k in range(S):
                    ta = tv[t, i, j, k] + v1[t, j]
                    v = ta + v2[t, k]
                    if v < ov[t, 0, i]:
                        ov[t, 0, i] = v
                    tb = tv[t, i, j, k] + v0[t, i]
                    v = tb + v2[t, k]
                    if v < ov[t, 1, j]:
                        ov[t, 1, j] = v
                    v = tb + v1[t, j]
                    if v < ov[t, 2, k]:
                        ov[t, 2, k] = v
        m0 = ov[t, 0, 0]
        m1 = ov[t, 1, 0]
        m2 = ov[t, 2, 0]
        for i in range(1, S):
            if ov[t, 0, i] < m0:
                m0 = ov[t, 0, i]
            if ov[t, 1, i] < m1:
                m1 = ov[t, 1, i]
            if ov[t, 2, i] < m2:
                m2 = ov[t, 2, i]
        for i in range(S):
            ov[t, 0, i] = ov[t, 0, i] - m0
            ov[t, 1, i] = ov[t, 1, i] - m1
            ov[t, 2, i] = ov[t, 2, i] - m2
    return out
