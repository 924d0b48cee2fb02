"""Rigid scan-to-mesh alignment (point-to-point ICP on a cropped face region)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCorrespondence, ShapeError
from .geometry import MeshQuery, RigidTransform, TriangleMesh, optimal_rigid_transform


@dataclass(frozen=True)
class IcpParams:
    downsample_fraction: float = 0.1
    max_iterations: int = 100
    convergence_tol: float = 1e-3
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.downsample_fraction <= 1:
            raise ValueError("downsample_fraction must be in (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_tol <= 0:
            raise ValueError("convergence_tol must be positive")


@dataclass
class AlignmentResult:
    transform: RigidTransform
    iterations_used: int
    final_mean_distance: float
    converged: bool
    # (mean distance, mean squared distance) of the sample after each update
    history: list = field(default_factory=list)


def crop_query(mesh: TriangleMesh, crop_mask) -> MeshQuery:
    faces = mesh.submesh_faces(crop_mask)
    if len(faces) == 0:
        raise ShapeError("crop mask leaves no complete face")
    return MeshQuery(mesh, faces)


def downsample(points, fraction, rng):
    n = len(points)
    m = min(n, max(3, math.ceil(fraction * n)))
    if m >= n:
        return points
    return points[np.sort(rng.choice(n, size=m, replace=False))]


def icp_align(points, mesh: TriangleMesh, crop_mask=None, params: IcpParams = IcpParams(),
              initial: RigidTransform | None = None, mesh_query: MeshQuery | None = None) -> AlignmentResult:
    """Align scan points (in scan coordinates) to ``mesh``.

    Returns the full scan-to-mesh transform, i.e. the accumulated ICP update
    composed with ``initial``.
    """
    initial = initial if initial is not None else RigidTransform.identity()
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ShapeError("cannot align an empty scan")
    if mesh_query is None:
        mesh_query = crop_query(mesh, crop_mask) if crop_mask is not None else MeshQuery(mesh)
    rng = np.random.default_rng(params.rng_seed)
    sample = downsample(pts, params.downsample_fraction, rng)

    current = initial
    moved = current.apply(sample)
    match = mesh_query.query(moved)
    prev = float(match.distance.mean())
    history = []
    for it in range(1, params.max_iterations + 1):
        try:
            step = optimal_rigid_transform(moved, match.points)
        except DegenerateCorrespondence:
            return AlignmentResult(initial, it - 1, prev, False, history)
        current = step.compose(current)
        moved = current.apply(sample)
        match = mesh_query.query(moved)
        err = float(match.distance.mean())
        history.append((err, float(np.mean(match.distance ** 2))))
        if abs(prev - err) < params.convergence_tol:
            return AlignmentResult(current, it, err, True, history)
        prev = err
    return AlignmentResult(current, params.max_iterations, prev, False, history)


def point_to_mesh_distances(points, mesh: TriangleMesh, mesh_query: MeshQuery | None = None):
    mq = mesh_query if mesh_query is not None else MeshQuery(mesh)
    return mq.query(np.asarray(points, dtype=np.float64).reshape(-1, 3)).distance


def point_to_mesh_error(points, mesh: TriangleMesh, mesh_query: MeshQuery | None = None):
    """(mean distance, mean squared distance) of every point to the full mesh."""
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if len(pts) == 0:
        raise ShapeError("empty scan")
    d = point_to_mesh_distances(pts, mesh, mesh_query)
    return float(d.mean()), float(np.mean(d * d))
