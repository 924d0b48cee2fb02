"""Linear shape model: mean mesh plus PCA basis, with file round-trips."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ModelFormatError, ShapeError
from .geometry import TriangleMesh
from .io_formats import read_container, write_container

MAGIC = b"MFMODEL1"


@dataclass
class MorphableModel:
    """Mean vertices (V, 3) and basis (3V, K).

    Basis rows are vertex-major with interleaved xyz, so rows ``3v:3v+3``
    belong to vertex ``v``.
    """

    mean_vertices: np.ndarray
    basis: np.ndarray
    faces: np.ndarray
    landmark_indices: dict = field(default_factory=dict)
    icp_crop_mask: np.ndarray | None = None

    def __post_init__(self):
        self.mean_vertices = np.ascontiguousarray(self.mean_vertices, dtype=np.float64)
        self.basis = np.ascontiguousarray(self.basis, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.icp_crop_mask is None:
            self.icp_crop_mask = np.ones(len(self.mean_vertices), dtype=bool)
        self.icp_crop_mask = np.asarray(self.icp_crop_mask, dtype=bool)
        self.landmark_indices = {str(k): int(v) for k, v in self.landmark_indices.items()}
        self.validate()

    def validate(self):
        v = self.mean_vertices
        if v.ndim != 2 or v.shape[1] != 3:
            raise ShapeError(f"mean_vertices must be (V, 3), got {v.shape}")
        if self.basis.ndim != 2 or self.basis.shape[0] != 3 * len(v):
            raise ShapeError(f"basis must be (3V, K) = ({3 * len(v)}, K), got {self.basis.shape}")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(v)):
            raise ShapeError("face index out of range")
        ids = list(self.landmark_indices.values())
        if len(set(ids)) != len(ids):
            raise ShapeError("landmark indices must be distinct")
        if any(i < 0 or i >= len(v) for i in ids):
            raise ShapeError("landmark index out of range")
        if self.icp_crop_mask.shape != (len(v),) or not self.icp_crop_mask.any():
            raise ShapeError("crop mask must be a non-empty boolean per vertex")

    @property
    def n_vertices(self):
        return len(self.mean_vertices)

    @property
    def rank(self):
        return self.basis.shape[1]

    def landmark_positions(self, vertices=None):
        verts = self.mean_vertices if vertices is None else vertices
        return {k: verts[i] for k, i in self.landmark_indices.items()}

    def mean_mesh(self):
        return TriangleMesh(self.mean_vertices.copy(), self.faces)


@dataclass
class DetailVector:
    """Per-vertex residual added on top of the PCA reconstruction."""

    delta: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.delta.shape != (len(self.valid), 3):
            raise ShapeError("detail must be (V, 3) with one validity flag per vertex")
        self.delta[~self.valid] = 0.0

    @classmethod
    def zeros(cls, n_vertices):
        return cls(np.zeros((n_vertices, 3)), np.zeros(n_vertices, dtype=bool))


def shape_offsets(model: MorphableModel, coefficients) -> np.ndarray:
    a = np.asarray(coefficients, dtype=np.float64).reshape(-1)
    if a.shape != (model.rank,):
        raise ShapeError(f"expected {model.rank} coefficients, got {a.shape[0]}")
    return (model.basis @ a).reshape(-1, 3)


def reconstruct(model: MorphableModel, coefficients, detail: DetailVector | None = None) -> TriangleMesh:
    """Vertices = mean + basis @ coefficients (+ detail)."""
    verts = model.mean_vertices + shape_offsets(model, coefficients)
    if detail is not None:
        if detail.delta.shape != verts.shape:
            raise ShapeError(f"detail shape {detail.delta.shape} != {verts.shape}")
        verts = verts + detail.delta
    return TriangleMesh(verts, model.faces)


def _rle(mask):
    runs, cur, n = [], False, 0
    for b in np.asarray(mask, dtype=bool):
        if b == cur:
            n += 1
        else:
            runs.append(n)
            cur, n = b, 1
    runs.append(n)
    return runs


def _unrle(runs, length):
    out = np.zeros(sum(runs), dtype=bool)
    pos, cur = 0, False
    for r in runs:
        out[pos:pos + r] = cur
        pos += r
        cur = not cur
    if len(out) != length:
        raise ModelFormatError("crop_mask_rle", f"decodes to {len(out)} entries, expected {length}")
    return out


def save_model(model: MorphableModel, path):
    header = {
        "V": model.n_vertices,
        "K": model.rank,
        "F": len(model.faces),
        "landmarks": model.landmark_indices,
        "crop_mask_rle": _rle(model.icp_crop_mask),
    }
    write_container(path, MAGIC, header, {
        "mean": model.mean_vertices,
        "basis": model.basis,
        "faces": model.faces.astype(np.int32),
    })


def load_model(path) -> MorphableModel:
    header, arrays = read_container(path, MAGIC, error=ModelFormatError)
    for key in ("V", "K", "F", "landmarks", "crop_mask_rle"):
        if key not in header:
            raise ModelFormatError(key, "missing from header")
    try:
        nv, k, nf = int(header["V"]), int(header["K"]), int(header["F"])
    except (TypeError, ValueError):
        raise ModelFormatError("V/K/F", "dimensions must be integers") from None
    expected = {"mean": (nv, 3), "basis": (3 * nv, k), "faces": (nf, 3)}
    for name, shape in expected.items():
        if name not in arrays:
            raise ModelFormatError(name, "block missing")
        if arrays[name].shape != shape:
            raise ModelFormatError(name, f"shape {arrays[name].shape} inconsistent with header {shape}")
    if not isinstance(header["landmarks"], dict):
        raise ModelFormatError("landmarks", "must be an object")
    runs = header["crop_mask_rle"]
    if not isinstance(runs, list) or any(not isinstance(r, int) or r < 0 for r in runs):
        raise ModelFormatError("crop_mask_rle", "must be a list of non-negative integers")
    mask = _unrle(runs, nv)
    try:
        return MorphableModel(
            arrays["mean"].astype(np.float64),
            arrays["basis"].astype(np.float64),
            arrays["faces"].astype(np.int64),
            header["landmarks"],
            mask,
        )
    except ShapeError as exc:
        raise ModelFormatError("model", str(exc)) from None
