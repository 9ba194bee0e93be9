# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for point splatting and heatmap sampling."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def splat_zbuffer(const double[:] u, const double[:] v, const double[:] depth,
                  int height, int width, int radius):
    """Z-buffered square splats; nearer point wins, ties go to the lower index."""
    cdef Py_ssize_t n = u.shape[0]
    zbuf_arr = np.zeros((height, width), dtype=np.float64)
    idx_arr = np.full((height, width), -1, dtype=np.int64)
    cdef double[:, :] zbuf = zbuf_arr
    cdef long long[:, :] idx = idx_arr
    cdef Py_ssize_t i
    cdef int cu, cv, px, py, du, dv
    cdef double d
    for i in range(n):
        d = depth[i]
        if not (d > 0.0):
            continue
        cu = <int>floor(u[i] + 0.5)
        cv = <int>floor(v[i] + 0.5)
        if cu < -radius or cu >= width + radius or cv < -radius or cv >= height + radius:
            continue
        for dv in range(-radius, radius + 1):
            py = cv + dv
            if py < 0 or py >= height:
                continue
            for du in range(-radius, radius + 1):
                px = cu + du
                if px < 0 or px >= width:
                    continue
                if idx[py, px] < 0 or d < zbuf[py, px]:
                    zbuf[py, px] = d
                    idx[py, px] = i
    return zbuf_arr, idx_arr


def bilinear_sample(const double[:, :] image, const double[:] u, const double[:] v):
    """Bilinear lookup at fractional pixel coordinates; outside the image reads 0."""
    cdef Py_ssize_t n = u.shape[0]
    cdef int height = image.shape[0]
    cdef int width = image.shape[1]
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[:] out = out_arr
    cdef Py_ssize_t i
    cdef int x0, y0, x1, y1
    cdef double fx, fy, acc, uu, vv
    for i in range(n):
        uu = u[i]
        vv = v[i]
        if not (uu > -1.0 and uu < width and vv > -1.0 and vv < height):
            continue
        x0 = <int>floor(uu)
        y0 = <int>floor(vv)
        fx = uu - x0
        fy = vv - y0
        x1 = x0 + 1
        y1 = y0 + 1
        acc = 0.0
        if y0 >= 0:
            if x0 >= 0:
                acc += (1.0 - fx) * (1.0 - fy) * image[y0, x0]
            if x1 < width:
                acc += fx * (1.0 - fy) * image[y0, x1]
        if y1 < height:
            if x0 >= 0:
                acc += (1.0 - fx) * fy * image[y1, x0]
            if x1 < width:
                acc += fx * fy * image[y1, x1]
        out[i] = acc
    return out_arr
