"""Brute-force reference implementations for small instances.

Each oracle uses a formulation unrelated to the production path: linear
scans instead of trees, plane projection plus segment clamping instead of
Voronoi-region walks, explicit normal equations instead of lstsq.
"""
import numpy as np


def brute_knn(points, query, k):
    pts = np.asarray(points, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    d2 = [float(np.dot(p - q, p - q)) for p in pts]
    order = sorted(range(len(pts)), key=lambda i: (d2[i], i))
    return np.array(order[:k], dtype=np.int64)


def _closest_on_segment(p, a, b):
    ab = b - a
    denom = float(np.dot(ab, ab))
    if denom == 0.0:
        return a.copy()
    t = float(np.dot(p - a, ab)) / denom
    if t <= 0.0:
        return a.copy()
    if t >= 1.0:
        return b.copy()
    return a + t * ab


def closest_on_triangle(p, a, b, c):
    """Closest point of triangle abc to p, via plane projection and edges."""
    n = np.cross(b - a, c - a)
    nn = float(np.dot(n, n))
    if nn > 0.0:
        proj = p - (np.dot(p - a, n) / nn) * n
        # inside test with signed sub-areas
        s1 = np.dot(np.cross(b - a, proj - a), n)
        s2 = np.dot(np.cross(c - b, proj - b), n)
        s3 = np.dot(np.cross(a - c, proj - c), n)
        if s1 >= 0 and s2 >= 0 and s3 >= 0:
            return proj
    cands = [_closest_on_segment(p, a, b), _closest_on_segment(p, b, c), _closest_on_segment(p, c, a)]
    d = [float(np.dot(x - p, x - p)) for x in cands]
    return cands[int(np.argmin(d))]


def brute_closest_triangle(vertices, faces, p):
    """(face index, closest point, distance) over every face.

    Faces whose distance exceeds the minimum by less than rounding noise,
    64 eps times (largest coordinate + distance), are ties; the lowest index wins.
    """
    v = np.asarray(vertices, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    found = []
    for fi, (i, j, k) in enumerate(np.asarray(faces)):
        x = closest_on_triangle(p, v[i], v[j], v[k])
        found.append((float(np.dot(x - p, x - p)), fi, x))
    dmin = min(d for d, _, _ in found)
    scale = max(1.0, float(np.abs(v[np.unique(np.asarray(faces))]).max()))
    tau = 64 * np.finfo(np.float64).eps * (scale + np.sqrt(dmin))
    band = 2 * np.sqrt(dmin) * tau + tau * tau
    d2, fi, x = min((t for t in found if t[0] <= dmin + band), key=lambda t: t[1])
    return fi, x, float(np.sqrt(d2))


def brute_dbscan(points, eps, min_pts):
    """Textbook DBSCAN over a full distance matrix.

    Points are visited in index order; a border point joins the first cluster
    that reaches it. Returns labels with -1 for noise.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    neigh = [list(np.flatnonzero(dist[i] <= eps)) for i in range(n)]
    core = [len(nb) >= min_pts for nb in neigh]
    labels = [-1] * n
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = list(neigh[i])
        while queue:
            j = queue.pop(0)
            if labels[j] == -1:
                labels[j] = cluster
                if core[j]:
                    queue.extend(neigh[j])
        cluster += 1
    return np.array(labels, dtype=np.int64)


def dense_lstsq(a, b, weights=None, regularization=0.0):
    """Solve min ||diag(w)(a x - b)||^2 + reg ||x||^2 via normal equations."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        a = a * w[:, None]
        b = b * w
    lhs = a.T @ a + regularization * np.eye(a.shape[1])
    return np.linalg.solve(lhs, a.T @ b)


def labels_equivalent(l1, l2):
    """True when two labelings agree up to a relabeling of cluster ids."""
    l1 = np.asarray(l1)
    l2 = np.asarray(l2)
    if l1.shape != l2.shape or not np.array_equal(l1 == -1, l2 == -1):
        return False
    fwd, back = {}, {}
    for a, b in zip(l1, l2):
        if a == -1:
            continue
        if fwd.setdefault(a, b) != b or back.setdefault(b, a) != a:
            return False
    return True
