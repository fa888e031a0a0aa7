"""
Metric primitives: vectors, shape statistics, poses, and numpy-backed rasters
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from app.core.exceptions import DimensionMismatch

QUATERNION_TOLERANCE = 1e-9
ROTATION_TOLERANCE = 1e-9


class Vec3(BaseModel):
    """Point or offset in meters"""
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    x: float
    y: float
    z: float

    @classmethod
    def from_array(cls, values) -> "Vec3":
        return cls(x=float(values[0]), y=float(values[1]), z=float(values[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.x, self.y, self.z)


class AxisStats(BaseModel):
    """Gaussian parameters and extrema of a point cloud along one axis"""
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    mu: float
    sigma: float
    min: float
    max: float


class ShapeVector(BaseModel):
    """Per-axis (mu, sigma, min, max) statistics, a richer stand-in for a bounding box"""
    model_config = ConfigDict(frozen=True)

    x: AxisStats
    y: AxisStats
    z: AxisStats

    def axes(self) -> Tuple[AxisStats, AxisStats, AxisStats]:
        return (self.x, self.y, self.z)

    def box_min(self) -> np.ndarray:
        return np.array([self.x.min, self.y.min, self.z.min])

    def box_max(self) -> np.ndarray:
        return np.array([self.x.max, self.y.max, self.z.max])

    def half_height(self) -> float:
        return (self.z.max - self.z.min) / 2.0

    def footprint(self) -> Tuple[float, float, float, float]:
        """Axis-aligned xy rectangle (x_min, x_max, y_min, y_max)"""
        return (self.x.min, self.x.max, self.y.min, self.y.max)

    def as_numbers(self) -> Tuple[float, ...]:
        return tuple(v for a in self.axes() for v in (a.mu, a.sigma, a.min, a.max))


# Gripper pointing straight down: 180 degrees about the world x axis
TOP_DOWN_QUATERNION: Tuple[float, float, float, float] = (0.0, 1.0, 0.0, 0.0)
IDENTITY_QUATERNION: Tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)


class Pose6DoF(BaseModel):
    """Position plus unit quaternion (w, x, y, z)"""
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    position: Vec3
    orientation: Tuple[float, float, float, float] = IDENTITY_QUATERNION

    @field_validator("orientation")
    @classmethod
    def _unit_norm(cls, value: Tuple[float, float, float, float]):
        norm = float(np.sqrt(sum(c * c for c in value)))
        if abs(norm - 1.0) > QUATERNION_TOLERANCE:
            raise ValueError(f"quaternion norm {norm} is not 1")
        return value


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Mask:
    """Instance mask; bits is a (height, width) boolean grid"""
    bits: np.ndarray

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise DimensionMismatch(f"mask must be 2-D, got shape {bits.shape}")
        object.__setattr__(self, "bits", _readonly(bits))

    @classmethod
    def empty(cls, width: int, height: int) -> "Mask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    def popcount(self) -> int:
        return int(self.bits.sum())

    def centroid_pixel(self) -> Tuple[int, int]:
        """Mean (u, v) of the mask pixels, rounded half-even"""
        rows, cols = np.nonzero(self.bits)
        if rows.size == 0:
            raise ValueError("empty mask has no centroid pixel")
        return int(np.rint(cols.mean())), int(np.rint(rows.mean()))

    def bounding_box(self) -> Tuple[int, int, int, int]:
        """(u_min, u_max, v_min, v_max), inclusive"""
        rows, cols = np.nonzero(self.bits)
        if rows.size == 0:
            raise ValueError("empty mask has no bounding box")
        return int(cols.min()), int(cols.max()), int(rows.min()), int(rows.max())


@dataclass(frozen=True, eq=False)
class DepthGrid:
    """Depth in meters with a per-pixel validity flag"""
    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        depth = np.ascontiguousarray(self.depth, dtype=np.float64)
        valid = np.ascontiguousarray(self.valid, dtype=bool)
        if depth.shape != valid.shape or depth.ndim != 2:
            raise DimensionMismatch(f"depth {depth.shape} and validity {valid.shape} differ")
        if np.any(depth[valid] <= 0.0):
            raise ValueError("valid depth cells must be positive")
        object.__setattr__(self, "depth", _readonly(depth))
        object.__setattr__(self, "valid", _readonly(valid))

    @property
    def width(self) -> int:
        return int(self.depth.shape[1])

    @property
    def height(self) -> int:
        return int(self.depth.shape[0])


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Intrinsics plus a rigid camera-to-world transform"""
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    projection: Literal["pinhole", "orthographic"] = "pinhole"

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ROTATION_TOLERANCE:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ROTATION_TOLERANCE:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", _readonly(rotation))
        object.__setattr__(self, "translation", _readonly(translation))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered (N, 3) points in meters"""
    points: np.ndarray
    frame: Literal["camera", "world"] = "world"

    def __post_init__(self):
        points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ValueError("point cloud holds non-finite values")
        object.__setattr__(self, "points", _readonly(points))

    def __len__(self) -> int:
        return int(self.points.shape[0])
