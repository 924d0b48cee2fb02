"""Spatial kernels: k-NN index, normals, closest point on mesh, rigid fits."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .errors import DegenerateCorrespondence, EmptyCloud, InsufficientPoints, ShapeError

_ORTHO_TOL = 1e-6


def _as_points(points, name="points"):
    arr = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeError(f"{name} must be (n, 3), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class RigidTransform:
    """x' = rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ShapeError(f"homogeneous transform must be 4x4, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform applying ``other`` first, then ``self``."""
        r = self.rotation @ other.rotation
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL or not np.allclose(
            r.T @ r, np.eye(3), atol=_ORTHO_TOL
        ):
            r = orthonormalize(r)
        return RigidTransform(r, self.rotation @ other.translation + self.translation)

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def rotation_angle_deg(self):
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))

    def is_valid(self, tol=1e-9):
        r = self.rotation
        return bool(
            np.allclose(r.T @ r, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1.0) <= tol
        )


def orthonormalize(r):
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_from_euler(yaw=0.0, pitch=0.0, roll=0.0, degrees=True):
    """Yaw about +y, pitch about +x, roll about +z, applied roll, pitch, yaw."""
    if degrees:
        yaw, pitch, roll = np.radians([yaw, pitch, roll])
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return ry @ rx @ rz


def pose_error(estimated: RigidTransform, truth: RigidTransform):
    """(rotation error in degrees, translation error in mm)."""
    delta = estimated.compose(truth.inverse())
    return delta.rotation_angle_deg(), float(np.linalg.norm(estimated.translation - truth.translation))


# ---------------------------------------------------------------- k-NN index


class SpatialIndex:
    """Immutable k-nearest / radius index over a fixed point set.

    Results match a linear scan exactly: ascending distance, ties to the
    lowest point index.
    """

    def __init__(self, points):
        pts = _as_points(points)
        if len(pts) == 0:
            raise EmptyCloud("cannot index an empty point set")
        if not np.all(np.isfinite(pts)):
            raise ShapeError("points must be finite")
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self):
        return len(self.points)

    def _exact_row(self, q, k):
        # all points at or within the k-th candidate distance, sorted exactly
        d, _ = self._tree.query(q, k=k)
        r = float(np.atleast_1d(d)[-1])
        cand = np.asarray(self._tree.query_ball_point(q, r * (1 + 1e-9) + 1e-12), dtype=np.int64)
        diff = self.points[cand] - q
        d2 = np.einsum("ij,ij->i", diff, diff)
        srt = np.lexsort((cand, d2))
        return cand[srt[:k]]

    def k_nearest(self, query, k: int) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64).reshape(3)
        return self.k_nearest_batch(q[None], k)[0]

    def k_nearest_batch(self, queries, k: int) -> np.ndarray:
        n = len(self.points)
        if k < 1:
            raise ValueError("k must be >= 1")
        if k > n:
            raise InsufficientPoints(f"k={k} exceeds {n} indexed points")
        qs = _as_points(queries, "queries")
        m = min(k + 1, n)
        _, idx = self._tree.query(qs, k=m)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(qs), m)
        diff = self.points[idx] - qs[:, None, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        srt = np.lexsort((idx, d2), axis=1)
        idx = np.take_along_axis(idx, srt, axis=1)
        d2 = np.take_along_axis(d2, srt, axis=1)
        out = idx[:, :k].copy()
        # rows where the boundary distance is shared need the slow exact path
        if m > k:
            ambiguous = np.flatnonzero(d2[:, k - 1] >= d2[:, k] * (1 - 1e-12))
        else:
            ambiguous = np.empty(0, dtype=np.int64)
        for row in ambiguous:
            out[row] = self._exact_row(qs[row], k)
        return out

    def radius(self, query, r: float) -> np.ndarray:
        """Indices within distance ``r`` (inclusive), ascending by index."""
        q = np.asarray(query, dtype=np.float64).reshape(3)
        return np.array(sorted(self._tree.query_ball_point(q, r)), dtype=np.int64)

    def radius_batch(self, queries, r: float):
        return [np.array(sorted(x), dtype=np.int64)
                for x in self._tree.query_ball_point(_as_points(queries), r)]


def build_index(points) -> SpatialIndex:
    return SpatialIndex(points)


def k_nearest(index: SpatialIndex, query, k: int) -> np.ndarray:
    return index.k_nearest(query, k)


# ---------------------------------------------------------------- normals


def normals_from_neighborhoods(nbhd):
    """Plane normals for stacked neighborhoods of shape (n, k, 3).

    Returns ``(normals, reliable)``. The sign is canonical: the component of
    largest magnitude is positive.
    """
    centered = nbhd - nbhd.mean(axis=1, keepdims=True)
    u, s, _ = np.linalg.svd(np.swapaxes(centered, 1, 2), full_matrices=False)
    normals = u[:, :, 2].copy()
    lead = np.argmax(np.abs(normals), axis=1)
    sign = np.sign(normals[np.arange(len(normals)), lead])
    sign[sign == 0] = 1.0
    normals *= sign[:, None]
    scale = np.maximum(s[:, 0], 1.0)
    reliable = (s[:, 1] - s[:, 2]) > 1e-9 * scale
    return normals, reliable


def estimate_normals(index: SpatialIndex, vertices, k: int = 30):
    verts = _as_points(vertices, "vertices")
    if len(index) < k:
        raise InsufficientPoints(f"normal estimation needs {k} points, index has {len(index)}")
    nb = index.k_nearest_batch(verts, k)
    return normals_from_neighborhoods(index.points[nb])


def estimate_normal(index: SpatialIndex, vertex, k: int = 30):
    """Unit normal of the least-squares plane through the k nearest points.

    Returns ``(normal, reliable)``; ``reliable`` is False when the two smallest
    singular values of the neighborhood coincide.
    """
    n, ok = estimate_normals(index, np.asarray(vertex, dtype=np.float64).reshape(1, 3), k)
    return n[0], bool(ok[0])


def unoriented_angle(n1, n2):
    """Angle between lines spanned by unit vectors, in [0, pi/2]."""
    c = np.abs(np.sum(np.asarray(n1) * np.asarray(n2), axis=-1))
    return np.arccos(np.clip(c, 0.0, 1.0))


# ---------------------------------------------------------------- meshes


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    masks: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = _as_points(self.vertices, "vertices")
        self.faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ShapeError("face index out of range")

    @property
    def n_vertices(self):
        return len(self.vertices)

    def face_normals(self):
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0), 0.5 * norm[:, 0]

    def vertex_normals(self):
        fn, area = self.face_normals()
        vn = np.zeros_like(self.vertices)
        for j in range(3):
            np.add.at(vn, self.faces[:, j], fn * area[:, None])
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        return vn / np.where(norm > 0, norm, 1.0)

    def submesh_faces(self, vertex_mask):
        """Indices of faces whose three vertices are all in ``vertex_mask``."""
        vm = np.asarray(vertex_mask, dtype=bool)
        return np.flatnonzero(vm[self.faces].all(axis=1))

    def transformed(self, t: RigidTransform):
        return TriangleMesh(t.apply(self.vertices), self.faces.copy(), dict(self.masks))


@dataclass(frozen=True)
class SurfacePoint:
    position: np.ndarray
    face_index: int
    barycentric: np.ndarray


@dataclass
class SurfaceQuery:
    """Batched closest-point results, one row per query point."""

    points: np.ndarray
    face_index: np.ndarray
    barycentric: np.ndarray
    distance: np.ndarray

    def __len__(self):
        return len(self.points)

    def __getitem__(self, i):
        return SurfacePoint(self.points[i], int(self.face_index[i]), self.barycentric[i])


_LEAF_SIZE = 4


def _build_bvh(verts, faces):
    tri = verts[faces]
    lo_t = tri.min(axis=1)
    hi_t = tri.max(axis=1)
    cent = tri.mean(axis=1)

    lo, hi, left, right, start, count = [], [], [], [], [], []
    order = np.empty(len(faces), dtype=np.int64)
    cursor = 0
    # explicit stack of (node id, face ids)
    stack = [(0, np.arange(len(faces), dtype=np.int64))]
    lo.append(None); hi.append(None); left.append(-1); right.append(-1)
    start.append(0); count.append(0)
    while stack:
        node, ids = stack.pop()
        lo[node] = lo_t[ids].min(axis=0)
        hi[node] = hi_t[ids].max(axis=0)
        if len(ids) <= _LEAF_SIZE:
            start[node] = cursor
            count[node] = len(ids)
            order[cursor:cursor + len(ids)] = ids
            cursor += len(ids)
            continue
        c = cent[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        half = len(ids) // 2
        part = np.argsort(c[:, axis], kind="stable")
        ids = ids[part]
        for child_ids in (ids[:half], ids[half:]):
            child = len(lo)
            lo.append(None); hi.append(None); left.append(-1); right.append(-1)
            start.append(0); count.append(0)
            stack.append((child, child_ids))
            if left[node] < 0:
                left[node] = child
            else:
                right[node] = child
    return (
        np.ascontiguousarray(np.array(lo, dtype=np.float64)),
        np.ascontiguousarray(np.array(hi, dtype=np.float64)),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(start, dtype=np.int64),
        np.array(count, dtype=np.int64),
        order,
    )


class MeshQuery:
    """Closest-point accelerator over a (possibly face-subset) mesh.

    Returned face indices refer to the full mesh.
    """

    def __init__(self, mesh: TriangleMesh, face_subset=None):
        if face_subset is None:
            face_ids = np.arange(len(mesh.faces), dtype=np.int64)
        else:
            face_ids = np.unique(np.asarray(face_subset, dtype=np.int64))
        if len(face_ids) == 0:
            raise ShapeError("mesh has no faces to query")
        self.mesh = mesh
        self._face_ids = face_ids
        self._faces = np.ascontiguousarray(mesh.faces[face_ids])
        self._verts = mesh.vertices
        self._bvh = _build_bvh(self._verts, self._faces)
        self._tie_scale = max(1.0, float(np.abs(self._verts[np.unique(self._faces)]).max()))

    def query(self, points) -> SurfaceQuery:
        pts = _as_points(points)
        if len(pts) == 0:
            return SurfaceQuery(np.empty((0, 3)), np.empty(0, np.int64), np.empty((0, 3)), np.empty(0))
        p, f, b, d2 = kernels.closest_points_bvh(pts, self._verts, self._faces, *self._bvh,
                                                 self._tie_scale)
        # subset ids are sorted, so the kernel's lowest-index tie rule carries over
        return SurfaceQuery(p, self._face_ids[f], b, np.sqrt(d2))


def closest_points_on_mesh(mesh: TriangleMesh, points, face_subset=None) -> SurfaceQuery:
    return MeshQuery(mesh, face_subset).query(points)


def closest_point_on_mesh(mesh: TriangleMesh, p) -> SurfacePoint:
    return MeshQuery(mesh).query(np.asarray(p, dtype=np.float64).reshape(1, 3))[0]


# ---------------------------------------------------------------- rigid fit


def optimal_rigid_transform(src, dst) -> RigidTransform:
    """Least-squares rotation and translation taking ``src`` onto ``dst``.

    SVD Procrustes with a sign correction so det(R) = +1.
    """
    a = _as_points(src, "src")
    b = _as_points(dst, "dst")
    if a.shape != b.shape:
        raise ShapeError(f"src {a.shape} and dst {b.shape} differ")
    if len(a) < 3:
        raise DegenerateCorrespondence("need at least 3 correspondences")
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    a0 = a - ca
    b0 = b - cb
    sv = np.linalg.svd(a0, compute_uv=False)
    scale = max(sv[0], 1e-300)
    if sv[1] <= 1e-9 * scale or sv[0] <= 1e-12:
        raise DegenerateCorrespondence("source points are collinear or coincident")
    h = a0.T @ b0
    u, _, vt = np.linalg.svd(h)
    d = 1.0 if np.linalg.det(vt.T @ u.T) >= 0 else -1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, cb - r @ ca)
