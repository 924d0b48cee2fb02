# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled closest-point kernels.

Mirrors ``morphfit._fallback`` exactly; the two are swapped at import time by
``morphfit.kernels``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

DEF MAX_STACK = 256
# distances within TIE_EPS * (coordinate scale + distance) count as ties
DEF TIE_EPS = 64 * 2.220446049250313e-16


cdef inline double _dot(double ax, double ay, double az,
                        double bx, double by, double bz) noexcept nogil:
    return ax * bx + ay * by + az * bz


cdef inline void _closest_on_triangle(
    double px, double py, double pz,
    double ax, double ay, double az,
    double bx, double by, double bz,
    double cx, double cy, double cz,
    double* out_v, double* out_w,
) noexcept nogil:
    # Voronoi-region walk; writes barycentric weights of b and c.
    cdef double abx = bx - ax, aby = by - ay, abz = bz - az
    cdef double acx = cx - ax, acy = cy - ay, acz = cz - az
    cdef double apx = px - ax, apy = py - ay, apz = pz - az
    cdef double d1 = _dot(abx, aby, abz, apx, apy, apz)
    cdef double d2 = _dot(acx, acy, acz, apx, apy, apz)
    if d1 <= 0.0 and d2 <= 0.0:
        out_v[0] = 0.0
        out_w[0] = 0.0
        return
    cdef double bpx = px - bx, bpy = py - by, bpz = pz - bz
    cdef double d3 = _dot(abx, aby, abz, bpx, bpy, bpz)
    cdef double d4 = _dot(acx, acy, acz, bpx, bpy, bpz)
    if d3 >= 0.0 and d4 <= d3:
        out_v[0] = 1.0
        out_w[0] = 0.0
        return
    cdef double vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        out_v[0] = d1 / (d1 - d3)
        out_w[0] = 0.0
        return
    cdef double cpx = px - cx, cpy = py - cy, cpz = pz - cz
    cdef double d5 = _dot(abx, aby, abz, cpx, cpy, cpz)
    cdef double d6 = _dot(acx, acy, acz, cpx, cpy, cpz)
    if d6 >= 0.0 and d5 <= d6:
        out_v[0] = 0.0
        out_w[0] = 1.0
        return
    cdef double vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        out_v[0] = 0.0
        out_w[0] = d2 / (d2 - d6)
        return
    cdef double va = d3 * d6 - d5 * d4
    cdef double e1, e2
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        e1 = d4 - d3
        e2 = d5 - d6
        out_w[0] = e1 / (e1 + e2)
        out_v[0] = 1.0 - out_w[0]
        return
    cdef double denom = 1.0 / (va + vb + vc)
    out_v[0] = vb * denom
    out_w[0] = vc * denom


cdef inline double _box_dist2(double px, double py, double pz,
                              const double* lo, const double* hi) noexcept nogil:
    cdef double d = 0.0, t
    t = lo[0] - px
    if t > 0.0:
        d += t * t
    else:
        t = px - hi[0]
        if t > 0.0:
            d += t * t
    t = lo[1] - py
    if t > 0.0:
        d += t * t
    else:
        t = py - hi[1]
        if t > 0.0:
            d += t * t
    t = lo[2] - pz
    if t > 0.0:
        d += t * t
    else:
        t = pz - hi[2]
        if t > 0.0:
            d += t * t
    return d


def closest_points_bvh(
    const double[:, ::1] queries,
    const double[:, ::1] verts,
    const cnp.int64_t[:, ::1] faces,
    const double[:, ::1] node_lo,
    const double[:, ::1] node_hi,
    const cnp.int64_t[::1] node_left,
    const cnp.int64_t[::1] node_right,
    const cnp.int64_t[::1] node_start,
    const cnp.int64_t[::1] node_count,
    const cnp.int64_t[::1] order,
    double tie_scale,
):
    """Exact closest surface point for every query via BVH branch-and-bound.

    Returns ``(points, face_index, barycentric, dist2)``. Ties in distance
    go to the lowest face index.
    """
    cdef Py_ssize_t nq = queries.shape[0]
    out_p = np.empty((nq, 3), dtype=np.float64)
    out_f = np.empty(nq, dtype=np.int64)
    out_b = np.empty((nq, 3), dtype=np.float64)
    out_d = np.empty(nq, dtype=np.float64)
    cdef double[:, ::1] op = out_p
    cdef cnp.int64_t[::1] of = out_f
    cdef double[:, ::1] ob = out_b
    cdef double[::1] od = out_d

    cdef Py_ssize_t qi, j, node, f, sp, left, right
    cdef cnp.int64_t stack[MAX_STACK]
    cdef double px, py, pz, best, dl, dr, v, w, u, x, y, z, dx, dy, dz, d2
    cdef cnp.int64_t best_f, ia, ib, ic
    cdef double best_v, best_w, tol, tau, root

    with nogil:
        for qi in range(nq):
            px = queries[qi, 0]
            py = queries[qi, 1]
            pz = queries[qi, 2]
            best = 1e308
            tol = 0.0
            best_f = -1
            best_v = 0.0
            best_w = 0.0
            sp = 0
            stack[sp] = 0
            sp += 1
            while sp > 0:
                sp -= 1
                node = stack[sp]
                if _box_dist2(px, py, pz, &node_lo[node, 0], &node_hi[node, 0]) > best + tol:
                    continue
                if node_count[node] > 0:
                    for j in range(node_start[node], node_start[node] + node_count[node]):
                        f = order[j]
                        ia = faces[f, 0]
                        ib = faces[f, 1]
                        ic = faces[f, 2]
                        _closest_on_triangle(px, py, pz,
                                             verts[ia, 0], verts[ia, 1], verts[ia, 2],
                                             verts[ib, 0], verts[ib, 1], verts[ib, 2],
                                             verts[ic, 0], verts[ic, 1], verts[ic, 2],
                                             &v, &w)
                        u = 1.0 - v - w
                        x = u * verts[ia, 0] + v * verts[ib, 0] + w * verts[ic, 0]
                        y = u * verts[ia, 1] + v * verts[ib, 1] + w * verts[ic, 1]
                        z = u * verts[ia, 2] + v * verts[ib, 2] + w * verts[ic, 2]
                        dx = x - px
                        dy = y - py
                        dz = z - pz
                        d2 = dx * dx + dy * dy + dz * dz
                        if d2 < best - tol or (d2 <= best + tol and f < best_f):
                            best = d2
                            best_f = f
                            best_v = v
                            best_w = w
                            root = sqrt(best)
                            tau = TIE_EPS * (tie_scale + root)
                            tol = 2.0 * root * tau + tau * tau
                else:
                    left = node_left[node]
                    right = node_right[node]
                    dl = _box_dist2(px, py, pz, &node_lo[left, 0], &node_hi[left, 0])
                    dr = _box_dist2(px, py, pz, &node_lo[right, 0], &node_hi[right, 0])
                    # push the farther child first so the nearer one is popped next
                    if sp + 2 > MAX_STACK:
                        with gil:
                            raise RuntimeError("BVH deeper than traversal stack")
                    if dl <= dr:
                        stack[sp] = right
                        stack[sp + 1] = left
                    else:
                        stack[sp] = left
                        stack[sp + 1] = right
                    sp += 2
            ia = faces[best_f, 0]
            ib = faces[best_f, 1]
            ic = faces[best_f, 2]
            u = 1.0 - best_v - best_w
            if u < 0.0:  # rounding on edge bc
                u = 0.0
            for j in range(3):
                op[qi, j] = u * verts[ia, j] + best_v * verts[ib, j] + best_w * verts[ic, j]
            of[qi] = best_f
            ob[qi, 0] = u
            ob[qi, 1] = best_v
            ob[qi, 2] = best_w
            od[qi] = best
    return out_p, out_f, out_b, out_d
