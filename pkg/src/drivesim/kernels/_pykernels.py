"""Reference implementations of the geometric hot kernels.

These mirror ``_ckernels.pyx`` operation for operation so both backends
produce bit-identical results: trigonometry goes through :mod:`math` (the
platform libm, same as the C build) and all array arithmetic is plain IEEE
elementwise work.
"""

import math

import numpy as np


def obb_overlap(ax, ay, ah, al, aw, bx, by, bh, bl, bw):
    """Separating-axis test for two oriented rectangles.

    Each box is given as centre ``(x, y)``, heading ``h`` (rad), full length
    ``l`` along the heading and full width ``w``. Touching boxes overlap.
    """
    ca = math.cos(ah)
    sa = math.sin(ah)
    cb = math.cos(bh)
    sb = math.sin(bh)
    dx = bx - ax
    dy = by - ay
    hla = 0.5 * al
    hwa = 0.5 * aw
    hlb = 0.5 * bl
    hwb = 0.5 * bw
    # box A axes
    # u_a = (ca, sa), v_a = (-sa, ca); same for B
    uu = ca * cb + sa * sb
    uv = -ca * sb + sa * cb
    vu = -sa * cb + ca * sb
    vv = sa * sb + ca * cb
    d = dx * ca + dy * sa
    if abs(d) > hla + hlb * abs(uu) + hwb * abs(uv):
        return False
    d = -dx * sa + dy * ca
    if abs(d) > hwa + hlb * abs(vu) + hwb * abs(vv):
        return False
    d = dx * cb + dy * sb
    if abs(d) > hlb + hla * abs(uu) + hwa * abs(vu):
        return False
    d = -dx * sb + dy * cb
    if abs(d) > hwb + hla * abs(uv) + hwa * abs(vv):
        return False
    return True


def project_point(px, py, segments):
    """Nearest point on a batch of segments.

    Args:
        px, py: query point.
        segments: float64 array of shape (N, 4) holding ``x0, y0, x1, y1``.

    Returns:
        ``(index, u, dist_sq, cross)`` for the closest segment, the clamped
        segment parameter in [0, 1], squared distance, and the cross product
        of the segment direction with the offset to the point (positive when
        the point lies to the left). Ties go to the lowest index. Returns
        ``(-1, 0.0, inf, 0.0)`` for an empty batch.
    """
    n = segments.shape[0]
    if n == 0:
        return -1, 0.0, math.inf, 0.0
    x0 = segments[:, 0]
    y0 = segments[:, 1]
    ddx = segments[:, 2] - x0
    ddy = segments[:, 3] - y0
    len2 = ddx * ddx + ddy * ddy
    rx = px - x0
    ry = py - y0
    u = (rx * ddx + ry * ddy) / len2
    u = np.minimum(np.maximum(u, 0.0), 1.0)
    qx = x0 + u * ddx
    qy = y0 + u * ddy
    ex = px - qx
    ey = py - qy
    d2 = ex * ex + ey * ey
    i = int(np.argmin(d2))
    cross = float(ddx[i] * ry[i] - ddy[i] * rx[i])
    return i, float(u[i]), float(d2[i]), cross


def _cell_range(lo, hi, half_cells, res, n):
    # cells whose index-space centre band may intersect [lo, hi] along an axis
    # pointing towards decreasing index (i.e. x forward = row 0 at the top)
    first = int(math.floor(half_cells - hi / res)) - 1
    last = int(math.floor(half_cells - lo / res)) + 1
    return max(first, 0), min(last, n - 1)


def rasterize_rects(grid, rects, value, res, overlap):
    """Paint oriented rectangles into an ego-frame grid in place.

    ``grid[i, j]`` is the cell centred at ego-frame
    ``x = (H/2 - i - 0.5) * res`` (forward) and
    ``y = (W/2 - j - 0.5) * res`` (left). ``rects`` is (N, 5):
    ``cx, cy, heading, half_length, half_width``. With ``overlap`` a cell is
    painted when its square touches the rectangle, otherwise when its centre
    lies inside. Cells keep the maximum of old and new value.
    """
    nrows, ncols = grid.shape
    hr = 0.5 * nrows
    hc = 0.5 * ncols
    half = 0.5 * res
    for k in range(rects.shape[0]):
        cx = float(rects[k, 0])
        cy = float(rects[k, 1])
        h = float(rects[k, 2])
        hl = float(rects[k, 3])
        hw = float(rects[k, 4])
        c = math.cos(h)
        s = math.sin(h)
        ex = hl * abs(c) + hw * abs(s)
        ey = hl * abs(s) + hw * abs(c)
        i0, i1 = _cell_range(cx - ex, cx + ex, hr, res, nrows)
        j0, j1 = _cell_range(cy - ey, cy + ey, hc, res, ncols)
        if i0 > i1 or j0 > j1:
            continue
        ii = np.arange(i0, i1 + 1, dtype=np.float64)
        jj = np.arange(j0, j1 + 1, dtype=np.float64)
        qx = ((hr - ii - 0.5) * res)[:, None]
        qy = ((hc - jj - 0.5) * res)[None, :]
        dx = cx - qx
        dy = cy - qy
        du = dx * c + dy * s
        dv = -dx * s + dy * c
        if overlap:
            hit = (
                (np.abs(dx) <= half + ex)
                & (np.abs(dy) <= half + ey)
                & (np.abs(du) <= hl + half * (abs(c) + abs(s)))
                & (np.abs(dv) <= hw + half * (abs(s) + abs(c)))
            )
        else:
            hit = (np.abs(du) <= hl) & (np.abs(dv) <= hw)
        block = grid[i0 : i1 + 1, j0 : j1 + 1]
        block[hit] = np.maximum(block[hit], value)
