"""Run configuration: one flat record of every tunable, loadable from JSON or
TOML and overridable from the command line."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .icp import IcpParams
from .preprocess import FilterParams

ENV_VAR = "MORPHFIT_CONFIG"


@dataclass(frozen=True)
class PhasePlan:
    phase1_iters: int = 4
    phase2_iters: int = 3
    use_detail_in_phase2: bool = True
    mislabel_threshold: float = 1.1
    # "mse": mean squared distance (mm^2) vs threshold; "rms": its root (mm)
    mislabel_statistic: str = "mse"

    def __post_init__(self):
        if self.phase1_iters < 1 or self.phase2_iters < 1:
            raise ConfigError("phase iteration counts must be >= 1")
        if self.mislabel_statistic not in ("mse", "rms"):
            raise ConfigError("mislabel_statistic must be 'mse' or 'rms'")
        if not self.mislabel_threshold > 0:
            raise ConfigError("mislabel_threshold must be positive")


@dataclass(frozen=True)
class RunConfig:
    # preprocessing
    preprocess: bool = True
    normal_k: int = 10
    normal_estimation_k: int = 30
    angle_threshold: float = 8.0
    dbscan_eps: float = 1.5
    dbscan_min_pts: int = 5
    crop_radius: float = 120.0
    # pose initialization
    pose_eval_samples: int = 500
    low_confidence_gate: float = 5.0
    # ICP
    downsample_fraction: float = 0.1
    max_iterations: int = 100
    convergence_tol: float = 1e-3
    # geometry
    hole_threshold: float = 10.0
    solver: str = "weighted"
    regularization: float = 0.0
    # phases and relabeling
    phase1_iters: int = 4
    phase2_iters: int = 3
    use_detail_in_phase2: bool = True
    mislabel_threshold: float = 1.1
    mislabel_statistic: str = "mse"
    relabel: bool = True
    # execution
    seed: int = 0
    jobs: int = 0  # worker processes; 0 = all available cores

    def __post_init__(self):
        for name in ("normal_k", "normal_estimation_k", "angle_threshold", "dbscan_eps",
                     "dbscan_min_pts", "crop_radius", "pose_eval_samples", "low_confidence_gate",
                     "hole_threshold"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.solver not in ("weighted", "stacked"):
            raise ConfigError("solver must be 'weighted' or 'stacked'")
        if self.regularization < 0:
            raise ConfigError("regularization must be >= 0")
        if self.jobs < 0:
            raise ConfigError("jobs must be >= 0 (0 = all cores)")
        try:
            self.icp_params()
            self.phase_plan()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def filter_params(self):
        return FilterParams(self.normal_k, self.angle_threshold, self.dbscan_eps,
                            self.dbscan_min_pts, self.crop_radius, self.normal_estimation_k)

    def icp_params(self, rng_seed=0):
        return IcpParams(self.downsample_fraction, self.max_iterations, self.convergence_tol, rng_seed)

    def phase_plan(self):
        return PhasePlan(self.phase1_iters, self.phase2_iters, self.use_detail_in_phase2,
                         self.mislabel_threshold, self.mislabel_statistic)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}

    @classmethod
    def from_dict(cls, data: dict, base: "RunConfig | None" = None):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        merged = (base or cls()).to_dict()
        for key, value in data.items():
            merged[key] = _coerce(key, value, type(merged[key]))
        return cls(**merged)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(_parse(text, path))


def _parse(text, path):
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ImportError:  # Python 3.10
            raise ConfigError("TOML configs need Python >= 3.11; use JSON") from None
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be an object")
    return data


def _coerce(key, value, kind):
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} must be a boolean")
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    return value


def default_config(path=None) -> RunConfig:
    """Config from ``path``, else from $MORPHFIT_CONFIG, else built-in defaults."""
    path = path or os.environ.get(ENV_VAR)
    return RunConfig.load(path) if path else RunConfig()
