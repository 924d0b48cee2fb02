"""Initial scan pose from 3D landmarks by exhaustive triplet search."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import DegenerateCorrespondence, DegenerateLandmarks, InsufficientLandmarks
from .geometry import MeshQuery, RigidTransform, optimal_rigid_transform
from .model import MorphableModel

MIN_TRIANGLE_AREA = 1.0  # mm^2


@dataclass
class PoseInit:
    transform: RigidTransform
    score: float
    low_confidence: bool
    best_triple: tuple
    # (triple of landmark names, mean distance) for every evaluated triple
    candidates: list = field(default_factory=list)

    @property
    def n_evaluated(self):
        return len(self.candidates)


def triangle_area(p):
    p = np.asarray(p, dtype=np.float64)
    return 0.5 * float(np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0])))


def evaluation_sample(points, n_samples=500, seed=0):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) <= n_samples:
        return pts
    rng = np.random.default_rng(seed)
    return pts[np.sort(rng.choice(len(pts), size=n_samples, replace=False))]


def init_pose_triplets(landmarks: dict, model: MorphableModel, points, n_samples: int = 500,
                       seed: int = 0, low_confidence_gate: float = 5.0,
                       mesh_query: MeshQuery | None = None) -> PoseInit:
    """Try a rigid fit on every triple of shared landmarks and keep the one
    whose transformed scan sample lies closest to the mean mesh."""
    names = sorted(set(landmarks) & set(model.landmark_indices))
    if len(names) < 3:
        raise InsufficientLandmarks(f"need >= 3 landmarks shared with the model, got {len(names)}")
    src_all = {n: np.asarray(landmarks[n], dtype=np.float64) for n in names}
    dst_all = model.landmark_positions()
    sample = evaluation_sample(points, n_samples, seed)
    mq = mesh_query if mesh_query is not None else MeshQuery(model.mean_mesh())

    best = None
    candidates = []
    for triple in combinations(names, 3):
        src = np.array([src_all[n] for n in triple])
        dst = np.array([dst_all[n] for n in triple])
        if triangle_area(src) < MIN_TRIANGLE_AREA or triangle_area(dst) < MIN_TRIANGLE_AREA:
            continue
        try:
            t = optimal_rigid_transform(src, dst)
        except DegenerateCorrespondence:
            continue
        score = float(mq.query(t.apply(sample)).distance.mean())
        candidates.append((triple, score))
        # strict comparison keeps the lexicographically first triple on ties
        if best is None or score < best[1]:
            best = (t, score, triple)
    if best is None:
        raise DegenerateLandmarks("every landmark triple is degenerate")
    t, score, triple = best
    return PoseInit(t, score, score > low_confidence_gate, triple, candidates)
