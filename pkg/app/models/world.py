"""
Simulator schemas: objects, world state, observations, task files
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.core.exceptions import UnknownObject
from app.models.geometry import CameraModel, DepthGrid, Mask, Pose6DoF, Vec3
from app.models.planning import GoalSpec

TASK_FORMAT = "task/1"


class ObjectKind(str, Enum):
    BLOCK = "block"
    CUP = "cup"
    FLAG = "flag"
    CYLINDER = "cylinder"
    PRISM = "prism"
    TRAY = "tray"


class ActionOutcome(str, Enum):
    OK = "ok"
    GRASP_MISS = "grasp_miss"
    TOPPLED = "toppled"
    HAND_FULL = "hand_full"
    UNREACHABLE = "unreachable"


class SimObject(BaseModel):
    """Axis-aligned box model of one asset"""
    model_config = ConfigDict(frozen=True)

    object_id: str
    descriptor: str
    half_extents: Vec3
    pose: Pose6DoF
    kind: ObjectKind = ObjectKind.BLOCK
    color: Optional[Tuple[int, int, int]] = None

    @field_validator("half_extents")
    @classmethod
    def _positive(cls, value: Vec3) -> Vec3:
        if min(value.as_tuple()) <= 0:
            raise ValueError("half extents must be positive")
        return value

    @property
    def center(self) -> np.ndarray:
        return self.pose.position.as_array()

    def box_min(self) -> np.ndarray:
        return self.center - self.half_extents.as_array()

    def box_max(self) -> np.ndarray:
        return self.center + self.half_extents.as_array()

    def footprint(self) -> Tuple[float, float, float, float]:
        lo, hi = self.box_min(), self.box_max()
        return (float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]))

    def top_center(self) -> np.ndarray:
        return self.center + np.array([0.0, 0.0, self.half_extents.z])

    def moved_to(self, position: np.ndarray) -> "SimObject":
        pose = Pose6DoF(position=Vec3.from_array(position), orientation=self.pose.orientation)
        return self.model_copy(update={"pose": pose})


class WorldState(BaseModel):
    """Ground truth of the tabletop; values are never mutated after construction"""
    model_config = ConfigDict(frozen=True)

    objects: Dict[str, SimObject]
    support: Dict[str, Tuple[str, ...]] = Field(default_factory=dict)
    held: Optional[str] = None
    contained: Dict[str, str] = Field(default_factory=dict)
    ever_hidden: Tuple[str, ...] = ()
    ever_on_table: Tuple[str, ...] = ()
    step: int = 0
    rng_seed: int = 0

    def obj(self, object_id: str) -> SimObject:
        try:
            return self.objects[object_id]
        except KeyError:
            raise UnknownObject(object_id) from None

    def covered_by(self, object_id: str) -> Optional[str]:
        for cup_id, inner in self.contained.items():
            if inner == object_id:
                return cup_id
        return None


@dataclass(frozen=True, eq=False)
class Observation:
    """Rendered RGB-D frame with occlusion-aware ground-truth instance masks"""
    rgb: np.ndarray
    depth: DepthGrid
    masks: Dict[str, Mask]
    cam: CameraModel
    descriptors: Dict[str, str]

    @property
    def width(self) -> int:
        return self.depth.width

    @property
    def height(self) -> int:
        return self.depth.height


class TaskCategory(str, Enum):
    BUILD = "build"
    DISASSEMBLE = "disassemble"
    HIDE_RESTORE = "hide_restore"
    COVER = "cover"


class TaskObject(BaseModel):
    """Object entry of a task file; position is the box centre in meters"""
    model_config = ConfigDict(frozen=True)

    object_id: str
    descriptor: str
    kind: ObjectKind = ObjectKind.BLOCK
    half_extents: Vec3
    position: Vec3
    color: Optional[Tuple[int, int, int]] = None


class TaskSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    format: str = TASK_FORMAT
    name: str
    category: TaskCategory
    description: str = ""
    objects: Tuple[TaskObject, ...]
    goal: GoalSpec
    horizon: int = Field(40, ge=1)

    @field_validator("format")
    @classmethod
    def _version(cls, value: str) -> str:
        if value != TASK_FORMAT:
            raise ValueError(f"unsupported task format {value!r}")
        return value

    def object_ids(self) -> List[str]:
        return [o.object_id for o in self.objects]
