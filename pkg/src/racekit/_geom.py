"""Planar geometry kernels shared by the track and simulator modules.

Conventions: polylines are (N, 2) float arrays with the closing segment
implied (last vertex connects back to the first); segment soups are
(M, 2, 2) arrays of (start, end) pairs. Angles are radians, CCW positive.
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-12


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a), 2.0 * np.pi)


def polyline_segments(verts: np.ndarray, closed: bool = True) -> np.ndarray:
    """Turn an (N, 2) vertex array into an (M, 2, 2) segment array."""
    verts = np.asarray(verts, dtype=float)
    if closed:
        nxt = np.roll(verts, -1, axis=0)
    else:
        nxt = verts[1:]
        verts = verts[:-1]
    return np.stack([verts, nxt], axis=1)


def cumulative_arclength(verts: np.ndarray, closed: bool = True):
    """Per-vertex cumulative arc length starting at 0, plus total length.

    For a closed polyline the returned table has N+1 entries; the final
    entry is the total length including the closing segment.
    """
    verts = np.asarray(verts, dtype=float)
    d = np.linalg.norm(np.diff(verts, axis=0), axis=1)
    if closed:
        d = np.append(d, np.linalg.norm(verts[0] - verts[-1]))
    table = np.concatenate([[0.0], np.cumsum(d)])
    return table, float(table[-1])


_ray_kernel = None


def _build_ray_kernel():
    """JIT the raycast hot loop on first use; fall back to numpy broadcasting
    when numba is unavailable. Both paths produce identical floats."""
    global _ray_kernel
    if _ray_kernel is not None:
        return _ray_kernel
    try:
        from numba import njit

        @njit(cache=True, fastmath=False)
        def kernel(ox, oy, cos_a, sin_a, seg, max_range, out):
            for i in range(cos_a.shape[0]):
                best = max_range
                dx = cos_a[i]
                dy = sin_a[i]
                for m in range(seg.shape[0]):
                    ax = seg[m, 0, 0]
                    ay = seg[m, 0, 1]
                    ex = seg[m, 1, 0] - ax
                    ey = seg[m, 1, 1] - ay
                    denom = dx * ey - dy * ex
                    if abs(denom) <= 1e-12:
                        continue
                    aox = ax - ox
                    aoy = ay - oy
                    t = (aox * ey - aoy * ex) / denom
                    if t < 0.0 or t >= best:
                        continue
                    u = (aox * dy - aoy * dx) / denom
                    if u < 0.0 or u > 1.0:
                        continue
                    best = t
                out[i] = best

        _ray_kernel = kernel
    except ImportError:
        _ray_kernel = False
    return _ray_kernel


def ray_hits(origin, angles, segments, max_range: float) -> np.ndarray:
    """Minimum hit distance per ray against a segment soup.

    origin (2,), angles (R,), segments (M, 2, 2). Rays that miss every
    segment report max_range. Rays exactly parallel to a segment are
    treated as misses.
    """
    angles = np.asarray(angles, dtype=float)
    o = np.asarray(origin, dtype=float)
    if len(segments) == 0:
        return np.full(angles.shape, max_range)
    kernel = _build_ray_kernel()
    if kernel:
        out = np.empty(angles.shape[0])
        kernel(float(o[0]), float(o[1]), np.cos(angles), np.sin(angles),
               np.ascontiguousarray(segments, dtype=np.float64), float(max_range), out)
        return out
    d = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # (R, 2)
    a = segments[:, 0, :]                                   # (M, 2)
    e = segments[:, 1, :] - a                               # (M, 2)
    ao = a - o                                              # (M, 2)
    # cross products, broadcast rays x segments
    denom = d[:, 0:1] * e[None, :, 1] - d[:, 1:2] * e[None, :, 0]   # (R, M)
    t_num = ao[:, 0] * e[:, 1] - ao[:, 1] * e[:, 0]                 # (M,)
    u_num = ao[None, :, 0] * d[:, 1:2] - ao[None, :, 1] * d[:, 0:1]  # (R, M)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = t_num[None, :] / denom
        u = u_num / denom
    valid = (np.abs(denom) > _EPS) & (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
    t = np.where(valid, t, np.inf)
    return np.minimum(t.min(axis=1), max_range)


def project_to_polyline(points, verts, arc_table, seg_idx=None):
    """Project points onto a closed polyline.

    points (P, 2); verts (N, 2) closed; arc_table (N+1,) cumulative arc
    lengths. seg_idx optionally restricts the candidate segments (window).
    Returns (s, d, idx): arc position, signed lateral distance (positive
    left of travel direction) and segment index, each (P,). Ties go to the
    segment with the smaller arc position.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    a = verts
    b = np.roll(verts, -1, axis=0)
    if seg_idx is not None:
        a = a[seg_idx]
        b = b[seg_idx]
    e = b - a                                      # (M, 2)
    ee = np.einsum("ij,ij->i", e, e)
    ee = np.maximum(ee, _EPS)
    ap = points[:, None, :] - a[None, :, :]        # (P, M, 2)
    t = np.clip(np.einsum("pmi,mi->pm", ap, e) / ee, 0.0, 1.0)
    foot = a[None, :, :] + t[:, :, None] * e[None, :, :]
    diff = points[:, None, :] - foot
    dist2 = np.einsum("pmi,pmi->pm", diff, diff)
    best = np.argmin(dist2, axis=1)                # first minimum = smaller s
    rows = np.arange(len(points))
    tb = t[rows, best]
    seg = best if seg_idx is None else np.asarray(seg_idx)[best]
    seg_len = arc_table[seg + 1] - arc_table[seg]
    s = arc_table[seg] + tb * seg_len
    db = diff[rows, best]
    eb = e[best]
    cross = eb[:, 0] * db[:, 1] - eb[:, 1] * db[:, 0]
    d = np.sign(cross) * np.sqrt(dist2[rows, best])
    return s, d, seg


def obb_corners(cx, cy, theta, length, width) -> np.ndarray:
    """Corners of an oriented rectangle centered at (cx, cy), CCW order."""
    c, s = np.cos(theta), np.sin(theta)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def obb_overlap(ca: np.ndarray, cb: np.ndarray) -> bool:
    """Separating-axis test for two rectangles given as (4, 2) corners.

    Closed intersection: touching counts as overlap.
    """
    for rect in (ca, cb):
        edges = np.roll(rect, -1, axis=0) - rect
        axes = np.stack([-edges[:2, 1], edges[:2, 0]], axis=1)
        for ax in axes:
            pa = ca @ ax
            pb = cb @ ax
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def obb_hits_segments(corners: np.ndarray, segments: np.ndarray) -> bool:
    """True if a rectangle ((4,2) corners) touches any segment (closed test)."""
    if len(segments) == 0:
        return False
    p, q = segments[:, 0, :], segments[:, 1, :]
    e = q - p
    # axes: the rectangle's two edge directions, each segment's direction
    # and normal. Separation on any axis means no contact.
    rect_edges = np.roll(corners, -1, axis=0)[:2] - corners[:2]
    hit = np.ones(len(segments), dtype=bool)
    for ax in rect_edges:
        n = np.array([-ax[1], ax[0]])
        rc = corners @ n
        ps, qs = p @ n, q @ n
        lo, hi = np.minimum(ps, qs), np.maximum(ps, qs)
        hit &= ~((rc.max() < lo) | (hi < rc.min()))
    for axes in (e, np.stack([-e[:, 1], e[:, 0]], axis=1)):
        rc = corners @ axes.T                      # (4, M)
        ps = np.einsum("mi,mi->m", p, axes)
        qs = np.einsum("mi,mi->m", q, axes)
        lo, hi = np.minimum(ps, qs), np.maximum(ps, qs)
        hit &= ~((rc.max(axis=0) < lo) | (hi < rc.min(axis=0)))
    return bool(hit.any())


def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def polyline_self_intersects(verts: np.ndarray) -> bool:
    """Check whether a closed polyline crosses itself (adjacent segments
    sharing a vertex are ignored). O(N^2), intended for one-time validation.
    """
    segs = polyline_segments(verts, closed=True)
    n = len(segs)
    if n < 4:
        return False
    ax, ay = segs[:, 0, 0], segs[:, 0, 1]
    bx, by = segs[:, 1, 0], segs[:, 1, 1]
    idx = np.arange(n)
    block = 256
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        i = idx[lo:hi, None]
        j = idx[None, :]
        # only check unordered non-adjacent pairs once
        adjacent = (j <= i + 1) | ((i == 0) & (j == n - 1))
        o1 = _orient(ax[lo:hi, None], ay[lo:hi, None], bx[lo:hi, None], by[lo:hi, None], ax[None, :], ay[None, :])
        o2 = _orient(ax[lo:hi, None], ay[lo:hi, None], bx[lo:hi, None], by[lo:hi, None], bx[None, :], by[None, :])
        o3 = _orient(ax[None, :], ay[None, :], bx[None, :], by[None, :], ax[lo:hi, None], ay[lo:hi, None])
        o4 = _orient(ax[None, :], ay[None, :], bx[None, :], by[None, :], bx[lo:hi, None], by[lo:hi, None])
        crossing = (o1 * o2 < 0) & (o3 * o4 < 0)
        collinear = (o1 == 0) & (o2 == 0) & (o3 == 0) & (o4 == 0)
        if np.any(crossing & ~adjacent):
            return True
        if np.any(collinear & ~adjacent):
            # collinear pair: overlaps iff 1D bounding intervals overlap
            ii, jj = np.nonzero(collinear & ~adjacent)
            ii = ii + lo
            for k in range(len(ii)):
                i1, j1 = ii[k], jj[k]
                lo1 = np.minimum(segs[i1, 0], segs[i1, 1])
                hi1 = np.maximum(segs[i1, 0], segs[i1, 1])
                lo2 = np.minimum(segs[j1, 0], segs[j1, 1])
                hi2 = np.maximum(segs[j1, 0], segs[j1, 1])
                if np.all(hi1 >= lo2) and np.all(hi2 >= lo1):
                    return True
    return False
