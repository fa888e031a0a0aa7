"""
Shared fixtures and builders for the test suite
"""
from typing import Optional, Sequence, Tuple

import numpy as np
import pytest

from app.core.config import Settings
from app.models.geometry import TOP_DOWN_QUATERNION, AxisStats, Pose6DoF, ShapeVector, Vec3
from app.models.graph import Cstg
from app.models.planning import ActionDirective, Gripper, Pose6DoFAction
from app.models.tokens import SelectedPatch, StfToken, VisualEvidence
from app.models.world import SimObject, TaskSpec, WorldState
from app.services.episode_runner import encode_tokens
from app.services.scene_graph import SubgoalCheck, update_graph
from app.services.simulator import render
from app.services.task_library import load_task, resolve_task_path

CUBE_HALF = (0.025, 0.0, 0.025)
CUP_HALF = (0.032, 0.0, 0.035)


# ── Settings ─────────────────────────────────────────────────────────────

@pytest.fixture
def cfg() -> Settings:
    return Settings()


def settings_with(**overrides) -> Settings:
    return Settings().model_copy(update=overrides)


# ── Tokens and graphs ────────────────────────────────────────────────────

def make_token(
    object_id: str,
    descriptor: str,
    center: Sequence[float],
    half: Sequence[float] = CUBE_HALF,
    t: int = 0,
    provenance: str = "",
) -> StfToken:
    """Token of an axis-aligned box; a zero half extent mimics the flat depth axis of a front view"""
    axes = [
        AxisStats(mu=float(c), sigma=float(h) / 2.0, min=float(c) - float(h), max=float(c) + float(h))
        for c, h in zip(center, half)
    ]
    evidence = VisualEvidence(
        selected_patches=(SelectedPatch(row=0, col=0, feature=(0.5, 0.5, 0.5)),),
        aggregate=(0.5, 0.5, 0.5),
    )
    return StfToken(
        object_id=object_id,
        descriptor=descriptor,
        evidence=evidence,
        centroid=Vec3.from_array(center),
        shape=ShapeVector(x=axes[0], y=axes[1], z=axes[2]),
        timestamp=t,
        provenance=provenance or object_id,
    )


def graph_of(*steps: Sequence[StfToken], cfg: Optional[Settings] = None, window_k: int = 3) -> Cstg:
    """Graph after feeding each step's tokens in order (timestamps are restamped)"""
    g = Cstg.empty(window_k)
    for t, tokens in enumerate(steps):
        stamped = [tok.model_copy(update={"timestamp": t}) for tok in tokens]
        g = update_graph(g, stamped, cfg=cfg)
    return g


# ── Tasks and worlds ─────────────────────────────────────────────────────

def library_task(name: str) -> TaskSpec:
    return load_task(resolve_task_path(name))


def observe(
    world: WorldState,
    g: Cstg,
    cfg: Optional[Settings] = None,
    executed: Optional[ActionDirective] = None,
    release: Optional[Vec3] = None,
    subgoal_check: Optional[SubgoalCheck] = None,
) -> Cstg:
    """Render the world and merge its tokens into the next graph step"""
    t = g.current_step + 1
    tokens = encode_tokens(render(world, cfg), t, cfg)
    return update_graph(g, tokens, executed, release_position=release, subgoal_check=subgoal_check, cfg=cfg)


def top_grasp(obj: SimObject, release: Optional[Tuple[float, float, float]] = None) -> Pose6DoFAction:
    """Top-down grasp 2 cm above the object, optionally released at a position"""
    top = obj.top_center() + np.array([0.0, 0.0, 0.02])
    return Pose6DoFAction(
        grasp=Pose6DoF(position=Vec3.from_array(top), orientation=TOP_DOWN_QUATERNION),
        release=None if release is None else Pose6DoF(
            position=Vec3.from_array(release), orientation=TOP_DOWN_QUATERNION,
        ),
        gripper=Gripper.CLOSE if release is None else Gripper.OPEN,
    )
