"""Pure numpy implementation of the compiled kernels in ``_kernels.pyx``.

Same signatures, same floating point operation order, so results agree with
the extension bit for bit on well-conditioned input.
"""
import numpy as np
from scipy.spatial import cKDTree

_CHUNK = 1 << 18
# Two distances within TIE_EPS * (coordinate scale + distance) of each other
# are ties: that is the rounding noise of a computed point-to-triangle distance.
TIE_EPS = 64 * np.finfo(np.float64).eps


def tie_band(best2, scale):
    """Squared-distance slack around ``best2`` that still counts as a tie."""
    d = np.sqrt(best2)
    tau = TIE_EPS * (scale + d)
    return 2.0 * d * tau + tau * tau


def closest_on_triangles(p, a, b, c):
    """Barycentric weights (v, w) of the closest point on triangles abc to p.

    All arguments are (n, 3) arrays, paired row by row.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    n = len(p)
    v = np.empty(n)
    w = np.empty(n)
    todo = np.ones(n, dtype=bool)

    def take(mask, vv, ww):
        m = todo & mask
        v[m] = vv[m] if isinstance(vv, np.ndarray) else vv
        w[m] = ww[m] if isinstance(ww, np.ndarray) else ww
        todo[m] = False

    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0.0) & (d2 <= 0.0), 0.0, 0.0)
        take((d3 >= 0.0) & (d4 <= d3), 1.0, 0.0)
        take((vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0), d1 / (d1 - d3), 0.0)
        take((d6 >= 0.0) & (d5 <= d6), 0.0, 1.0)
        take((vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0), 0.0, d2 / (d2 - d6))
        e1 = d4 - d3
        e2 = d5 - d6
        wbc = e1 / (e1 + e2)
        take((va <= 0.0) & (e1 >= 0.0) & (e2 >= 0.0), 1.0 - wbc, wbc)
        denom = 1.0 / (va + vb + vc)
        take(np.ones(n, dtype=bool), vb * denom, vc * denom)
    return v, w


def _box_dist2(q, lo, hi):
    d = np.maximum(lo - q, 0.0) + np.maximum(q - hi, 0.0)
    return np.einsum("...j,...j->...", d, d)


def closest_points_bvh(queries, verts, faces, node_lo, node_hi, node_left,
                       node_right, node_start, node_count, order, tie_scale):
    nq = len(queries)
    leaves = np.flatnonzero(node_count > 0)
    # any referenced vertex lies on the surface, so its distance bounds the answer
    used = np.unique(faces)
    ub, _ = cKDTree(verts[used]).query(queries)
    ub2 = ub * ub + 2.0 * tie_band(ub * ub, tie_scale)

    best_d = np.full(nq, np.inf)
    best_f = np.full(nq, -1, dtype=np.int64)
    best_v = np.zeros(nq)
    best_w = np.zeros(nq)

    rows_per_chunk = max(1, _CHUNK // max(len(leaves), 1))
    for s in range(0, nq, rows_per_chunk):
        q = queries[s:s + rows_per_chunk]
        bd = _box_dist2(q[:, None, :], node_lo[leaves][None], node_hi[leaves][None])
        qi, li = np.nonzero(bd <= ub2[s:s + rows_per_chunk, None])
        leaf = leaves[li]
        counts = node_count[leaf]
        qi = np.repeat(qi, counts)
        starts = np.repeat(node_start[leaf], counts)
        offs = np.arange(len(qi)) - np.repeat(np.cumsum(counts) - counts, counts)
        f = order[starts + offs]

        p = q[qi]
        ia, ib, ic = faces[f, 0], faces[f, 1], faces[f, 2]
        va, vb, vc = verts[ia], verts[ib], verts[ic]
        v, w = closest_on_triangles(p, va, vb, vc)
        u = 1.0 - v - w
        pos = u[:, None] * va + v[:, None] * vb + w[:, None] * vc
        dd = pos - p
        d2 = dd[:, 0] * dd[:, 0] + dd[:, 1] * dd[:, 1] + dd[:, 2] * dd[:, 2]

        # per query: lowest face index among those tied with the minimum
        nrow = len(q)
        dmin = np.full(nrow, np.inf)
        np.minimum.at(dmin, qi, d2)
        tied = d2 <= dmin[qi] + tie_band(dmin[qi], tie_scale)
        srt = np.lexsort((f, ~tied, qi))
        qs = qi[srt]
        first = np.ones(len(qs), dtype=bool)
        first[1:] = qs[1:] != qs[:-1]
        pick = srt[first]
        rows = s + qi[pick]
        best_d[rows] = d2[pick]
        best_f[rows] = f[pick]
        best_v[rows] = v[pick]
        best_w[rows] = w[pick]

    ia, ib, ic = faces[best_f, 0], faces[best_f, 1], faces[best_f, 2]
    u = np.maximum(1.0 - best_v - best_w, 0.0)  # rounding on edge bc
    pts = u[:, None] * verts[ia] + best_v[:, None] * verts[ib] + best_w[:, None] * verts[ic]
    bary = np.stack([u, best_v, best_w], axis=1)
    return pts, best_f, bary, best_d
