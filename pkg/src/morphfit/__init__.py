"""Joint alignment of multiple 3D face scans with morphable-model fitting."""
from .config import PhasePlan, RunConfig
from .errors import MorphfitError
from .fit import (
    AggregateOffsets,
    OffsetField,
    aggregate_offsets,
    compute_detail,
    compute_offset_field,
    estimate_geometry,
    solve_coefficients_stacked,
    solve_coefficients_weighted,
)
from .geometry import (
    MeshQuery,
    RigidTransform,
    SpatialIndex,
    TriangleMesh,
    closest_point_on_mesh,
    closest_points_on_mesh,
    estimate_normals,
    optimal_rigid_transform,
)
from .icp import AlignmentResult, IcpParams, icp_align, point_to_mesh_error
from .kernels import BACKEND
from .model import DetailVector, MorphableModel, load_model, reconstruct, save_model
from .pipeline import (
    ScanRecord,
    SubjectState,
    detect_mislabeled,
    relabel,
    run_iteration,
    run_pipeline,
)
from .pose_init import PoseInit, init_pose_triplets
from .preprocess import (
    FilterParams,
    PointCloudScan,
    crop_to_face,
    filter_by_roughness,
    largest_cluster,
    preprocess_scan,
    restore_removed,
)

__version__ = "0.1.0"

__all__ = [
    "AggregateOffsets", "AlignmentResult", "BACKEND", "DetailVector", "FilterParams", "IcpParams",
    "MeshQuery", "MorphableModel", "MorphfitError", "OffsetField", "PhasePlan", "PointCloudScan",
    "PoseInit", "RigidTransform", "RunConfig", "ScanRecord", "SpatialIndex", "SubjectState",
    "TriangleMesh", "aggregate_offsets", "closest_point_on_mesh", "closest_points_on_mesh",
    "compute_detail", "compute_offset_field", "crop_to_face", "detect_mislabeled",
    "estimate_geometry", "estimate_normals", "filter_by_roughness", "icp_align",
    "init_pose_triplets", "largest_cluster", "load_model", "optimal_rigid_transform",
    "point_to_mesh_error", "preprocess_scan", "reconstruct", "relabel", "restore_removed",
    "run_iteration", "run_pipeline", "save_model", "solve_coefficients_stacked",
    "solve_coefficients_weighted",
]
