"""Per-scan offset fields and the shape-coefficient / detail solves."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientPoints, RankDeficient, ShapeError
from .geometry import MeshQuery, SpatialIndex, TriangleMesh
from .model import DetailVector, MorphableModel, reconstruct, shape_offsets

DEFAULT_HOLE_THRESHOLD = 10.0


@dataclass
class OffsetField:
    """Per-vertex offsets from the model mean, valid where the scan saw the vertex."""

    offsets: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.offsets.shape != (len(self.valid), 3):
            raise ShapeError("offsets must be (V, 3) with one validity flag per vertex")
        self.offsets[~self.valid] = 0.0


@dataclass
class AggregateOffsets:
    mean: np.ndarray
    weight: np.ndarray


def compute_offset_field(current_mesh: TriangleMesh, points, model: MorphableModel,
                         hole_threshold: float = DEFAULT_HOLE_THRESHOLD,
                         mesh_query: MeshQuery | None = None) -> OffsetField:
    """Offsets that move each vertex toward an aligned scan.

    Every scan point is paired with its closest point on the current surface.
    Each vertex takes the three paired surface points nearest to it and moves
    by their mean displacement toward the scan; vertices whose three surface
    points are farther than ``hole_threshold`` on average are left invalid.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise InsufficientPoints(f"offset field needs >= 3 scan points, got {len(pts)}")
    if current_mesh.n_vertices != model.n_vertices:
        raise ShapeError("current mesh does not share the model topology")
    # canonical order makes the result independent of scan point order
    pts = pts[np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))]
    mq = mesh_query if mesh_query is not None else MeshQuery(current_mesh)
    surf = mq.query(pts).points
    verts = current_mesh.vertices
    nb = SpatialIndex(surf).k_nearest_batch(verts, 3)
    rel = (pts[nb] - surf[nb]).mean(axis=1)
    reach = np.linalg.norm(surf[nb] - verts[:, None, :], axis=2).mean(axis=1)
    valid = reach <= hole_threshold
    offsets = rel + (verts - model.mean_vertices)
    return OffsetField(np.where(valid[:, None], offsets, 0.0), valid)


def aggregate_offsets(fields) -> AggregateOffsets:
    fields = list(fields)
    if not fields:
        raise ValueError("need at least one offset field")
    total = np.zeros_like(fields[0].offsets)
    count = np.zeros(len(fields[0].valid), dtype=np.int64)
    for f in fields:
        total += np.where(f.valid[:, None], f.offsets, 0.0)
        count += f.valid
    mean = np.divide(total, count[:, None], out=np.zeros_like(total), where=count[:, None] > 0)
    return AggregateOffsets(mean, count)


def _lstsq(a, b, k):
    sol, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < k:
        raise RankDeficient(int(rank), k)
    return sol


def _vertex_rows(vertex_ids):
    return (3 * np.asarray(vertex_ids)[:, None] + np.arange(3)).reshape(-1)


def solve_coefficients_stacked(fields, model: MorphableModel) -> np.ndarray:
    """Least squares over every field's valid rows stacked together."""
    blocks_a, blocks_b = [], []
    for f in fields:
        rows = _vertex_rows(np.flatnonzero(f.valid))
        blocks_a.append(model.basis[rows])
        blocks_b.append(f.offsets.reshape(-1)[rows])
    a = np.concatenate(blocks_a) if blocks_a else np.empty((0, model.rank))
    if len(a) < model.rank:
        raise RankDeficient(int(np.linalg.matrix_rank(a)) if len(a) else 0, model.rank)
    return _lstsq(a, np.concatenate(blocks_b), model.rank)


def solve_coefficients_weighted(agg: AggregateOffsets, model: MorphableModel,
                                regularization: float = 0.0) -> np.ndarray:
    """Least squares on the mean offsets with each vertex's three rows scaled
    by its contribution count; unobserved vertices drop out."""
    seen = np.flatnonzero(agg.weight > 0)
    k = model.rank
    if 3 * len(seen) < k and regularization <= 0:
        raise RankDeficient(3 * len(seen), k)
    rows = _vertex_rows(seen)
    w = np.repeat(agg.weight[seen].astype(np.float64), 3)
    a = model.basis[rows] * w[:, None]
    b = agg.mean.reshape(-1)[rows] * w
    if regularization > 0:
        a = np.vstack([a, np.sqrt(regularization) * np.eye(k)])
        b = np.concatenate([b, np.zeros(k)])
    return _lstsq(a, b, k)


def compute_detail(agg: AggregateOffsets, model: MorphableModel, coefficients) -> DetailVector:
    observed = agg.weight >= 1
    delta = agg.mean - shape_offsets(model, coefficients)
    return DetailVector(np.where(observed[:, None], delta, 0.0), observed)


@dataclass
class GeometryEstimate:
    coefficients: np.ndarray
    detail: DetailVector | None
    mesh: TriangleMesh
    aggregate: AggregateOffsets
    fields: list


def estimate_geometry(model: MorphableModel, current_mesh: TriangleMesh, aligned_points,
                      use_detail: bool = False, hole_threshold: float = DEFAULT_HOLE_THRESHOLD,
                      solver: str = "weighted", regularization: float = 0.0) -> GeometryEstimate:
    """One geometry update from already-aligned scan point sets."""
    mq = MeshQuery(current_mesh)
    fields = [compute_offset_field(current_mesh, p, model, hole_threshold, mq) for p in aligned_points]
    agg = aggregate_offsets(fields)
    if solver == "weighted":
        coeffs = solve_coefficients_weighted(agg, model, regularization)
    elif solver == "stacked":
        coeffs = solve_coefficients_stacked(fields, model)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    detail = compute_detail(agg, model, coeffs) if use_detail else None
    return GeometryEstimate(coeffs, detail, reconstruct(model, coeffs, detail), agg, fields)
