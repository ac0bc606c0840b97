# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometric kernels; see ``_pykernels`` for the reference semantics."""

from libc.math cimport cos, sin, fabs, floor, INFINITY

import numpy as np
cimport numpy as cnp

cnp.import_array()


def obb_overlap(double ax, double ay, double ah, double al, double aw,
                double bx, double by, double bh, double bl, double bw):
    cdef double ca = cos(ah)
    cdef double sa = sin(ah)
    cdef double cb = cos(bh)
    cdef double sb = sin(bh)
    cdef double dx = bx - ax
    cdef double dy = by - ay
    cdef double hla = 0.5 * al
    cdef double hwa = 0.5 * aw
    cdef double hlb = 0.5 * bl
    cdef double hwb = 0.5 * bw
    cdef double uu = ca * cb + sa * sb
    cdef double uv = -ca * sb + sa * cb
    cdef double vu = -sa * cb + ca * sb
    cdef double vv = sa * sb + ca * cb
    cdef double d
    d = dx * ca + dy * sa
    if fabs(d) > hla + hlb * fabs(uu) + hwb * fabs(uv):
        return False
    d = -dx * sa + dy * ca
    if fabs(d) > hwa + hlb * fabs(vu) + hwb * fabs(vv):
        return False
    d = dx * cb + dy * sb
    if fabs(d) > hlb + hla * fabs(uu) + hwa * fabs(vu):
        return False
    d = -dx * sb + dy * cb
    if fabs(d) > hwb + hla * fabs(uv) + hwa * fabs(vv):
        return False
    return True


def project_point(double px, double py, const double[:, :] segments):
    cdef Py_ssize_t n = segments.shape[0]
    cdef Py_ssize_t k, best = -1
    cdef double x0, y0, ddx, ddy, len2, rx, ry, u, qx, qy, ex, ey, d2
    cdef double best_u = 0.0, best_d2 = INFINITY, best_cross = 0.0
    for k in range(n):
        x0 = segments[k, 0]
        y0 = segments[k, 1]
        ddx = segments[k, 2] - x0
        ddy = segments[k, 3] - y0
        len2 = ddx * ddx + ddy * ddy
        rx = px - x0
        ry = py - y0
        u = (rx * ddx + ry * ddy) / len2
        if u < 0.0:
            u = 0.0
        if u > 1.0:
            u = 1.0
        qx = x0 + u * ddx
        qy = y0 + u * ddy
        ex = px - qx
        ey = py - qy
        d2 = ex * ex + ey * ey
        if d2 < best_d2 or best < 0:
            best = k
            best_d2 = d2
            best_u = u
            best_cross = ddx * ry - ddy * rx
    return best, best_u, best_d2, best_cross


cdef inline void _cell_range(double lo, double hi, double half_cells, double res,
                             Py_ssize_t n, Py_ssize_t* first, Py_ssize_t* last):
    cdef Py_ssize_t a = <Py_ssize_t>floor(half_cells - hi / res) - 1
    cdef Py_ssize_t b = <Py_ssize_t>floor(half_cells - lo / res) + 1
    first[0] = a if a > 0 else 0
    last[0] = b if b < n - 1 else n - 1


def rasterize_rects(float[:, :] grid, const double[:, :] rects, float value,
                    double res, bint overlap):
    cdef Py_ssize_t nrows = grid.shape[0]
    cdef Py_ssize_t ncols = grid.shape[1]
    cdef double hr = 0.5 * nrows
    cdef double hc = 0.5 * ncols
    cdef double half = 0.5 * res
    cdef Py_ssize_t k, i, j, i0, i1, j0, j1
    cdef double cx, cy, h, hl, hw, c, s, ex, ey, qx, qy, dx, dy, du, dv
    cdef double lim_u, lim_v
    for k in range(rects.shape[0]):
        cx = rects[k, 0]
        cy = rects[k, 1]
        h = rects[k, 2]
        hl = rects[k, 3]
        hw = rects[k, 4]
        c = cos(h)
        s = sin(h)
        ex = hl * fabs(c) + hw * fabs(s)
        ey = hl * fabs(s) + hw * fabs(c)
        _cell_range(cx - ex, cx + ex, hr, res, nrows, &i0, &i1)
        _cell_range(cy - ey, cy + ey, hc, res, ncols, &j0, &j1)
        lim_u = hl + half * (fabs(c) + fabs(s))
        lim_v = hw + half * (fabs(s) + fabs(c))
        for i in range(i0, i1 + 1):
            qx = (hr - <double>i - 0.5) * res
            for j in range(j0, j1 + 1):
                qy = (hc - <double>j - 0.5) * res
                dx = cx - qx
                dy = cy - qy
                du = dx * c + dy * s
                dv = -dx * s + dy * c
                if overlap:
                    if not (fabs(dx) <= half + ex and fabs(dy) <= half + ey
                            and fabs(du) <= lim_u and fabs(dv) <= lim_v):
                        continue
                else:
                    if not (fabs(du) <= hl and fabs(dv) <= hw):
                        continue
                if grid[i, j] < value:
                    grid[i, j] = value
