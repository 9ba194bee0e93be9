"""Pure-numpy implementations of the compiled kernels (same semantics, bit for bit)."""

import numpy as np


def splat_zbuffer(u, v, depth, height, width, radius):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    zbuf = np.zeros((height, width), dtype=np.float64)
    idx = np.full((height, width), -1, dtype=np.int64)

    keep = np.flatnonzero(depth > 0.0)
    if keep.size == 0:
        return zbuf, idx
    cu = np.floor(u[keep] + 0.5).astype(np.int64)
    cv = np.floor(v[keep] + 0.5).astype(np.int64)
    offsets = np.arange(-radius, radius + 1)
    du, dv = np.meshgrid(offsets, offsets, indexing="xy")
    px = (cu[:, None] + du.ravel()[None, :]).ravel()
    py = (cv[:, None] + dv.ravel()[None, :]).ravel()
    pid = np.repeat(keep, du.size)
    d = depth[pid]
    inside = (px >= 0) & (px < width) & (py >= 0) & (py < height)
    px, py, pid, d = px[inside], py[inside], pid[inside], d[inside]
    if pid.size == 0:
        return zbuf, idx
    flat = py * width + px
    order = np.lexsort((pid, d, flat))
    flat_sorted = flat[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = order[first]
    zbuf.ravel()[flat[winners]] = d[winners]
    idx.ravel()[flat[winners]] = pid[winners]
    return zbuf, idx


def bilinear_sample(image, u, v):
    image = np.asarray(image, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    height, width = image.shape
    out = np.zeros(u.shape[0], dtype=np.float64)
    ok = (u > -1.0) & (u < width) & (v > -1.0) & (v < height)
    uu, vv = u[ok], v[ok]
    x0 = np.floor(uu).astype(np.int64)
    y0 = np.floor(vv).astype(np.int64)
    fx = uu - x0
    fy = vv - y0
    x1, y1 = x0 + 1, y0 + 1
    acc = np.zeros(uu.shape[0])
    # accumulate in the same order as the compiled loop so results match exactly
    for yy, xx, w in (
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ):
        m = (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
        contrib = np.zeros(uu.shape[0])
        contrib[m] = w[m] * image[yy[m], xx[m]]
        acc = acc + contrib
    out[ok] = acc
    return out
