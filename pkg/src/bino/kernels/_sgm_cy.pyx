# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled four-direction SGM aggregation (hot kernel).

Identical float32 arithmetic and operation order to the numpy fallback in
sgm_py.py; the two must agree bit-for-bit.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline float _fmin(float a, float b) nogil:
    return a if a < b else b


cdef void _scan_line(const float* cost, float* agg, float* prev, float* cand,
                     Py_ssize_t steps, Py_ssize_t nd, Py_ssize_t stride,
                     float p1, float p2) nogil:
    """Aggregate one scanline; cost/agg indexed as base + s*stride + d."""
    cdef Py_ssize_t s, d
    cdef float best, m
    for d in range(nd):
        prev[d] = cost[d]
        agg[d] += cost[d]
    for s in range(1, steps):
        best = prev[0]
        for d in range(1, nd):
            best = _fmin(best, prev[d])
        for d in range(nd):
            m = prev[d]
            if d > 0:
                m = _fmin(m, prev[d - 1] + p1)
            if d < nd - 1:
                m = _fmin(m, prev[d + 1] + p1)
            m = _fmin(m, best + p2)
            cand[d] = (cost[s * stride + d] + m) - best
        for d in range(nd):
            prev[d] = cand[d]
            agg[s * stride + d] += cand[d]


def aggregate(cost_in, double p1, double p2):
    """Sum of the four directional aggregations {left, right, up, down}."""
    cdef cnp.ndarray[cnp.float32_t, ndim=3, mode="c"] cost = \
        np.ascontiguousarray(cost_in, dtype=np.float32)
    cdef Py_ssize_t h = cost.shape[0]
    cdef Py_ssize_t w = cost.shape[1]
    cdef Py_ssize_t nd = cost.shape[2]
    cdef cnp.ndarray[cnp.float32_t, ndim=3, mode="c"] agg = \
        np.zeros((h, w, nd), dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] prev = np.empty(nd, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] cand = np.empty(nd, dtype=np.float32)
    cdef float fp1 = <float>p1
    cdef float fp2 = <float>p2
    cdef Py_ssize_t r, c
    cdef const float* cbase
    cdef float* abase
    cdef float* pprev = <float*>cnp.PyArray_DATA(prev)
    cdef float* pcand = <float*>cnp.PyArray_DATA(cand)
    cdef const float* cdata = <const float*>cnp.PyArray_DATA(cost)
    cdef float* adata = <float*>cnp.PyArray_DATA(agg)
    cdef Py_ssize_t row_stride = w * nd

    with nogil:
        # left -> right and right -> left
        for r in range(h):
            _scan_line(cdata + r * row_stride, adata + r * row_stride,
                       pprev, pcand, w, nd, nd, fp1, fp2)
            _scan_line(cdata + r * row_stride + (w - 1) * nd,
                       adata + r * row_stride + (w - 1) * nd,
                       pprev, pcand, w, nd, -nd, fp1, fp2)
        # top -> bottom and bottom -> top
        for c in range(w):
            _scan_line(cdata + c * nd, adata + c * nd,
                       pprev, pcand, h, nd, row_stride, fp1, fp2)
            _scan_line(cdata + (h - 1) * row_stride + c * nd,
                       adata + (h - 1) * row_stride + c * nd,
                       pprev, pcand, h, nd, -row_stride, fp1, fp2)
    return agg
