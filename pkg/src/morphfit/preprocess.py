"""Scan cleanup: drop rough (hair-like) points, keep the largest dense
cluster, crop around the landmarks. Removed points are kept for restoring."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyAfterClustering, EmptyAfterCrop, EmptyCloud, InsufficientPoints, ShapeError
from .geometry import SpatialIndex, estimate_normals


@dataclass(frozen=True)
class PointCloudScan:
    points: np.ndarray
    scan_id: str = ""
    subject_label: str = ""
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None
    removed_points: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    removed_normals: np.ndarray | None = None
    removed_colors: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ShapeError(f"scan {self.scan_id!r}: non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(n) != len(pts):
                raise ShapeError(f"scan {self.scan_id!r}: {len(n)} normals for {len(pts)} points")
            if len(n) and np.abs(np.linalg.norm(n, axis=1) - 1.0).max() > 1e-6:
                raise ShapeError(f"scan {self.scan_id!r}: normals must be unit length")
            object.__setattr__(self, "normals", n)
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(c) != len(pts):
                raise ShapeError(f"scan {self.scan_id!r}: {len(c)} colors for {len(pts)} points")
            object.__setattr__(self, "colors", c)
        object.__setattr__(self, "removed_points",
                           np.asarray(self.removed_points, dtype=np.float64).reshape(-1, 3))

    def __len__(self):
        return len(self.points)

    def split(self, keep) -> "PointCloudScan":
        """Keep rows where ``keep`` is True; move the others to the removed set."""
        keep = np.asarray(keep, dtype=bool)
        drop = ~keep

        def moved(cur, removed):
            # attributes survive only while every removed point carries them
            if cur is None or (removed is None and len(self.removed_points)):
                return None
            if removed is None:
                return cur[drop]
            return np.concatenate([removed, cur[drop]])

        return replace(
            self,
            points=self.points[keep],
            normals=None if self.normals is None else self.normals[keep],
            colors=None if self.colors is None else self.colors[keep],
            removed_points=np.concatenate([self.removed_points, self.points[drop]]),
            removed_normals=moved(self.normals, self.removed_normals),
            removed_colors=moved(self.colors, self.removed_colors),
        )

    def transformed(self, t) -> "PointCloudScan":
        """Apply a rigid transform to points, normals and removed points."""
        rn = self.removed_normals
        return replace(
            self,
            points=t.apply(self.points),
            normals=None if self.normals is None else self.normals @ t.rotation.T,
            removed_points=t.apply(self.removed_points) if len(self.removed_points) else self.removed_points,
            removed_normals=None if rn is None else rn @ t.rotation.T,
        )


@dataclass(frozen=True)
class FilterParams:
    normal_k: int = 10
    angle_threshold: float = 8.0
    dbscan_eps: float = 1.5
    dbscan_min_pts: int = 5
    crop_radius: float = 120.0
    normal_estimation_k: int = 30

    def __post_init__(self):
        for name in ("normal_k", "angle_threshold", "dbscan_eps", "dbscan_min_pts",
                     "crop_radius", "normal_estimation_k"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def with_normals(scan: PointCloudScan, k: int = 30):
    """Scan with normals attached, plus a per-point reliability flag."""
    if scan.normals is not None:
        return scan, np.ones(len(scan), dtype=bool)
    if len(scan) < k:
        raise InsufficientPoints(f"scan {scan.scan_id!r}: {len(scan)} points, normals need {k}")
    idx = SpatialIndex(scan.points)
    normals, reliable = estimate_normals(idx, scan.points, k)
    return replace(scan, normals=normals), reliable


def roughness(points, normals, k: int):
    """Mean unoriented angle (degrees) between each normal and its k neighbors' normals."""
    idx = SpatialIndex(points)
    nb = idx.k_nearest_batch(points, k + 1)
    own = nb == np.arange(len(points))[:, None]
    # drop self, or the farthest candidate if self was crowded out by duplicates
    no_self = ~own.any(axis=1)
    own[no_self, -1] = True
    nb = nb[~own].reshape(len(points), k)
    cosines = np.abs(np.einsum("ij,ikj->ik", normals, normals[nb]))
    angles = np.degrees(np.arccos(np.clip(cosines, 0.0, 1.0)))
    return angles.mean(axis=1)


def filter_by_roughness(scan: PointCloudScan, params: FilterParams = FilterParams()) -> PointCloudScan:
    if len(scan) < params.normal_k + 1:
        raise InsufficientPoints(
            f"scan {scan.scan_id!r}: {len(scan)} points, roughness needs {params.normal_k + 1}"
        )
    scan, reliable = with_normals(scan, params.normal_estimation_k)
    rough = roughness(scan.points, scan.normals, params.normal_k)
    return scan.split(reliable & (rough <= params.angle_threshold))


def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """Cluster labels (-1 = noise). Points are visited in index order and a
    border point joins the first cluster to reach it."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    neigh = SpatialIndex(pts).radius_batch(pts, eps)
    core = np.array([len(nb) >= min_pts for nb in neigh])
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = deque(neigh[i].tolist())
        while queue:
            j = queue.popleft()
            if labels[j] == -1:
                labels[j] = cluster
                if core[j]:
                    queue.extend(neigh[j].tolist())
        cluster += 1
    return labels


def largest_cluster(scan: PointCloudScan, params: FilterParams = FilterParams()) -> PointCloudScan:
    if len(scan) == 0:
        raise EmptyCloud(f"scan {scan.scan_id!r} is empty")
    labels = dbscan(scan.points, params.dbscan_eps, params.dbscan_min_pts)
    if (labels < 0).all():
        raise EmptyAfterClustering(f"scan {scan.scan_id!r}: every point is noise")
    sizes = np.bincount(labels[labels >= 0])
    lowest = np.full(len(sizes), len(labels))
    np.minimum.at(lowest, labels[labels >= 0], np.flatnonzero(labels >= 0))
    # largest first, then the cluster holding the lowest point index
    best = int(np.lexsort((lowest, -sizes))[0])
    return scan.split(labels == best)


def crop_to_face(scan: PointCloudScan, landmarks, params: FilterParams = FilterParams()) -> PointCloudScan:
    lm = np.asarray(list(landmarks.values()) if isinstance(landmarks, dict) else landmarks,
                    dtype=np.float64).reshape(-1, 3)
    if len(lm) == 0:
        raise ValueError("crop needs at least one landmark")
    centroid = lm.mean(axis=0)
    keep = np.linalg.norm(scan.points - centroid, axis=1) <= params.crop_radius
    if not keep.any():
        raise EmptyAfterCrop(f"scan {scan.scan_id!r}: no points within {params.crop_radius} mm")
    return scan.split(keep)


def restore_removed(scan: PointCloudScan) -> PointCloudScan:
    if len(scan.removed_points) == 0:
        return scan
    normals = None
    if scan.normals is not None and scan.removed_normals is not None:
        normals = np.concatenate([scan.normals, scan.removed_normals])
    colors = None
    if scan.colors is not None and scan.removed_colors is not None:
        colors = np.concatenate([scan.colors, scan.removed_colors])
    return replace(
        scan,
        points=np.concatenate([scan.points, scan.removed_points]),
        normals=normals,
        colors=colors,
        removed_points=np.empty((0, 3)),
        removed_normals=None,
        removed_colors=None,
    )


def preprocess_scan(scan: PointCloudScan, landmarks=None, params: FilterParams = FilterParams()):
    """Crop (when landmarks are given), roughness filter, largest cluster."""
    if landmarks is not None and len(landmarks):
        scan = crop_to_face(scan, landmarks, params)
    scan = filter_by_roughness(scan, params)
    return largest_cluster(scan, params)
