# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled rotated-rectangle overlap kernels.

Scalar per-pair Sutherland-Hodgman clipping plus shoelace area; the numpy
backend in _puregeom mirrors the same arithmetic. Boxes are rows of
[cx, cy, length, width, yaw].
"""

from libc.math cimport cos, sin, fabs

import numpy as np


cdef void _corners(double cx, double cy, double l, double w, double yaw,
                   double* xs, double* ys) noexcept nogil:
    cdef double hx = l / 2.0
    cdef double hy = w / 2.0
    cdef double c = cos(yaw)
    cdef double s = sin(yaw)
    xs[0] = cx + c * hx - s * hy
    ys[0] = cy + s * hx + c * hy
    xs[1] = cx - c * hx - s * hy
    ys[1] = cy - s * hx + c * hy
    xs[2] = cx - c * hx + s * hy
    ys[2] = cy - s * hx - c * hy
    xs[3] = cx + c * hx + s * hy
    ys[3] = cy + s * hx - c * hy


cdef double _overlap(double* ax, double* ay, double* bx, double* by) noexcept nogil:
    cdef double px[16]
    cdef double py[16]
    cdef double qx[16]
    cdef double qy[16]
    cdef int n = 4
    cdef int m, i, j, nx
    cdef double ox, oy, ex, ey, d_cur, d_nxt, t, area

    for i in range(4):
        px[i] = ax[i]
        py[i] = ay[i]

    for j in range(4):
        ox = bx[j]
        oy = by[j]
        ex = bx[(j + 1) % 4] - ox
        ey = by[(j + 1) % 4] - oy
        m = 0
        for i in range(n):
            nx = i + 1
            if nx == n:
                nx = 0
            d_cur = ex * (py[i] - oy) - ey * (px[i] - ox)
            d_nxt = ex * (py[nx] - oy) - ey * (px[nx] - ox)
            if d_cur >= 0.0:
                qx[m] = px[i]
                qy[m] = py[i]
                m += 1
            if (d_cur >= 0.0) != (d_nxt >= 0.0):
                t = d_cur / (d_cur - d_nxt)
                qx[m] = px[i] + t * (px[nx] - px[i])
                qy[m] = py[i] + t * (py[nx] - py[i])
                m += 1
        n = m
        for i in range(n):
            px[i] = qx[i]
            py[i] = qy[i]
        if n == 0:
            return 0.0

    if n < 3:
        return 0.0
    area = 0.0
    for i in range(n):
        nx = i + 1
        if nx == n:
            nx = 0
        area += px[i] * py[nx] - px[nx] * py[i]
    return 0.5 * fabs(area)


cdef double _pair_overlap(const double* a, const double* b) noexcept nogil:
    # order the pair lexicographically: the clip direction (and thus the
    # floating-point result) must not depend on argument order
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    cdef const double* first = a
    cdef const double* second = b
    cdef int c
    for c in range(5):
        if b[c] < a[c]:
            first = b
            second = a
            break
        if b[c] > a[c]:
            break
    _corners(first[0], first[1], first[2], first[3], first[4], ax, ay)
    _corners(second[0], second[1], second[2], second[3], second[4], bx, by)
    return _overlap(ax, ay, bx, by)


cdef double _pair_iou(const double* a, const double* b) noexcept nogil:
    cdef double inter = _pair_overlap(a, b)
    cdef double union_ = a[2] * a[3] + b[2] * b[3] - inter
    if union_ <= 0.0:
        return 0.0
    return inter / union_


def overlap_area_pairs(double[:, ::1] boxes_a, double[:, ::1] boxes_b):
    if boxes_a.shape[0] != boxes_b.shape[0] or boxes_a.shape[1] != 5 or boxes_b.shape[1] != 5:
        raise ValueError("paired boxes must be (n,5) arrays of equal length")
    cdef Py_ssize_t n = boxes_a.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = _pair_overlap(&boxes_a[i, 0], &boxes_b[i, 0])
    return out_arr


def iou_pairs(double[:, ::1] boxes_a, double[:, ::1] boxes_b):
    if boxes_a.shape[0] != boxes_b.shape[0] or boxes_a.shape[1] != 5 or boxes_b.shape[1] != 5:
        raise ValueError("paired boxes must be (n,5) arrays of equal length")
    cdef Py_ssize_t n = boxes_a.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = _pair_iou(&boxes_a[i, 0], &boxes_b[i, 0])
    return out_arr


def iou_matrix(double[:, ::1] boxes_a, double[:, ::1] boxes_b):
    if boxes_a.shape[1] != 5 or boxes_b.shape[1] != 5:
        raise ValueError("boxes must be (n,5) arrays")
    cdef Py_ssize_t n = boxes_a.shape[0]
    cdef Py_ssize_t m = boxes_b.shape[0]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(m):
                out[i, j] = _pair_iou(&boxes_a[i, 0], &boxes_b[j, 0])
    return out_arr
