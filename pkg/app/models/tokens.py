"""
Spatio-Temporal Fusion Token schemas
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.exceptions import DimensionMismatch
from app.models.geometry import ShapeVector, Vec3


@dataclass(frozen=True, eq=False)
class PatchFeatureGrid:
    """grid_n x grid_n feature vectors computed over an image of source_dims (width, height)"""
    grid_n: int
    features: np.ndarray
    source_dims: Tuple[int, int]

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        if features.ndim != 3 or features.shape[:2] != (self.grid_n, self.grid_n):
            raise DimensionMismatch(
                f"features shape {features.shape} does not match grid_n={self.grid_n}"
            )
        if features.shape[2] < 1:
            raise ValueError("feature vectors must have at least one component")
        features.setflags(write=False)
        object.__setattr__(self, "features", features)

    @property
    def feature_length(self) -> int:
        return int(self.features.shape[2])


class SelectedPatch(BaseModel):
    model_config = ConfigDict(frozen=True)

    row: int = Field(..., ge=0)
    col: int = Field(..., ge=0)
    feature: Tuple[float, ...]


class VisualEvidence(BaseModel):
    """Selected patches and their mean feature (v_i^t)"""
    model_config = ConfigDict(frozen=True)

    selected_patches: Tuple[SelectedPatch, ...]
    aggregate: Tuple[float, ...]
    fallback: bool = False

    def aggregate_norm(self) -> float:
        return float(np.linalg.norm(np.asarray(self.aggregate, dtype=np.float64)))


class StfToken(BaseModel):
    """Per-object record <v, c, s, t>"""
    model_config = ConfigDict(frozen=True)

    object_id: str
    descriptor: str
    evidence: VisualEvidence
    centroid: Vec3
    shape: ShapeVector
    timestamp: int = Field(..., ge=0)
    provenance: str = Field("", description="Key of the instance mask the token was built from")

    def centroid_in_box(self, eps: float) -> bool:
        c = self.centroid.as_array()
        return bool(np.all(c >= self.shape.box_min() - eps) and np.all(c <= self.shape.box_max() + eps))

    def relabeled(self, object_id: str) -> "StfToken":
        return self.model_copy(update={"object_id": object_id})


class TokenSummary(BaseModel):
    """Fields recovered from a serialized token"""
    model_config = ConfigDict(frozen=True)

    object_id: str
    descriptor: str
    timestamp: int
    centroid: Vec3
    shape: ShapeVector
    patch_count: int
    aggregate_norm: float
    fallback: bool
