"""
Tabletop block-world simulator
Axis-aligned boxes with kinematic pick/place, gravity settle, topple rule, cup enclosure,
z-buffer RGB-D rendering with ground-truth instance masks, and task success checks
"""
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.core.config import Settings, get_settings
from app.models.geometry import CameraModel, DepthGrid, Mask, Pose6DoF, Vec3
from app.models.planning import TABLE, GoalKind, InstructionKind, Pose6DoFAction, parse_instruction
from app.models.world import ActionOutcome, ObjectKind, Observation, SimObject, TaskSpec, WorldState
from app.services.geometry import inside_box, interval_overlap

logger = logging.getLogger(__name__)

# Front view: camera x -> world x, camera y (image down) -> world -z, optical axis -> world +y
FRONT_VIEW_ROTATION = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])

BACKGROUND_RGB = (128, 128, 128)
DEFAULT_RGB = (200, 200, 200)
COLOR_PALETTE: Dict[str, Tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 80, 220),
    "yellow": (235, 210, 40),
    "orange": (240, 140, 30),
    "purple": (140, 60, 180),
    "white": (245, 245, 245),
    "gray": (110, 110, 120),
    "grey": (110, 110, 120),
    "black": (20, 20, 20),
    "pink": (240, 130, 180),
    "brown": (130, 80, 40),
    "cyan": (40, 200, 210),
}

SETTLE_EPS = 1e-6
PENETRATION_EPS = 1e-6
TOPPLE_CLEARANCE = 0.01


def make_camera(cfg: Optional[Settings] = None) -> CameraModel:
    """
    Front camera covering the table from x = -W/2 to W/2 pixels and z = 0 to H pixels

    Args:
        cfg: Settings override

    Returns:
        CameraModel in the configured projection
    """
    cfg = cfg or get_settings()
    focal = 1.0 / cfg.RENDER_PIXEL_SIZE
    if cfg.RENDER_PROJECTION == "pinhole":
        # Same footprint as the orthographic view on the plane y = 0
        focal = cfg.RENDER_CAMERA_DISTANCE / cfg.RENDER_PIXEL_SIZE
    return CameraModel(
        fx=focal,
        fy=focal,
        cx=(cfg.RENDER_WIDTH - 1) / 2.0,
        cy=cfg.RENDER_HEIGHT - 0.5,
        rotation=FRONT_VIEW_ROTATION,
        translation=np.array([0.0, -cfg.RENDER_CAMERA_DISTANCE, 0.0]),
        projection=cfg.RENDER_PROJECTION,
    )


def view_top(cfg: Optional[Settings] = None) -> float:
    cfg = cfg or get_settings()
    return cfg.RENDER_PIXEL_SIZE * cfg.RENDER_HEIGHT


def object_color(obj: SimObject) -> Tuple[int, int, int]:
    if obj.color is not None:
        return tuple(obj.color)
    for word in obj.descriptor.lower().split():
        if word in COLOR_PALETTE:
            return COLOR_PALETTE[word]
    return DEFAULT_RGB


def _camera_rays(cam: CameraModel, width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    """World-frame ray origins and directions per pixel; the ray parameter is camera depth"""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    x = (u - cam.cx) / cam.fx
    y = (v - cam.cy) / cam.fy
    if cam.projection == "pinhole":
        origins_c = np.zeros((height, width, 3))
        dirs_c = np.stack([x, y, np.ones_like(x)], axis=-1)
    else:
        origins_c = np.stack([x, y, np.zeros_like(x)], axis=-1)
        dirs_c = np.broadcast_to(np.array([0.0, 0.0, 1.0]), (height, width, 3))
    origins = origins_c @ cam.rotation.T + cam.translation
    dirs = dirs_c @ cam.rotation.T
    return origins, dirs


def _slab_hits(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Entry and exit ray parameters through an axis-aligned box, and the hit flag"""
    t_enter = np.full(origins.shape[:2], -np.inf)
    t_exit = np.full(origins.shape[:2], np.inf)
    inside = np.ones(origins.shape[:2], dtype=bool)
    for axis in range(3):
        o, d = origins[..., axis], dirs[..., axis]
        parallel = np.abs(d) < 1e-15
        # Rays parallel to a slab hit it iff the origin lies in [lo, hi)
        inside &= ~parallel | ((o >= lo[axis]) & (o < hi[axis]))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = np.where(parallel, -np.inf, (lo[axis] - o) / d)
            t2 = np.where(parallel, np.inf, (hi[axis] - o) / d)
        t_enter = np.maximum(t_enter, np.minimum(t1, t2))
        t_exit = np.minimum(t_exit, np.maximum(t1, t2))
    hit = inside & (t_enter < t_exit) & (t_exit > 0)
    return t_enter, t_exit, hit


def render(w: WorldState, cfg: Optional[Settings] = None) -> Observation:
    """
    Rasterise the world into RGB, depth and occlusion-aware instance masks

    The sensor reports the mid-depth of each ray's passage through the box it
    hits first. Objects enclosed by a cup get empty masks.

    Args:
        w: World state
        cfg: Settings override

    Returns:
        Observation
    """
    cfg = cfg or get_settings()
    cam = make_camera(cfg)
    width, height = cfg.RENDER_WIDTH, cfg.RENDER_HEIGHT
    origins, dirs = _camera_rays(cam, width, height)

    ids = sorted(w.objects)
    hidden = set(w.contained.values())
    nearest = np.full((height, width), np.inf)
    sensed = np.zeros((height, width))
    owner = np.full((height, width), -1, dtype=np.int64)
    for index, object_id in enumerate(ids):
        if object_id in hidden:
            continue
        obj = w.objects[object_id]
        t_enter, t_exit, hit = _slab_hits(origins, dirs, obj.box_min(), obj.box_max())
        closer = hit & (t_enter < nearest)
        nearest = np.where(closer, t_enter, nearest)
        sensed = np.where(closer, (t_enter + t_exit) / 2.0, sensed)
        owner = np.where(closer, index, owner)

    valid = owner >= 0
    if cfg.RENDER_NOISE_SIGMA > 0:
        rng = np.random.default_rng(w.rng_seed * 1000003 + w.step)
        noise = rng.normal(0.0, cfg.RENDER_NOISE_SIGMA, size=sensed.shape)
        sensed = np.where(valid, np.maximum(sensed + noise, 1e-6), sensed)
    sensed = np.where(valid, sensed, 0.0)

    rgb = np.empty((height, width, 3), dtype=np.uint8)
    rgb[...] = BACKGROUND_RGB
    masks: Dict[str, Mask] = {}
    for index, object_id in enumerate(ids):
        bits = owner == index
        rgb[bits] = object_color(w.objects[object_id])
        masks[object_id] = Mask(bits)

    return Observation(
        rgb=rgb,
        depth=DepthGrid(depth=sensed, valid=valid),
        masks=masks,
        cam=cam,
        descriptors={object_id: w.objects[object_id].descriptor for object_id in ids},
    )


def _footprint_area(a: SimObject, b: SimObject) -> float:
    ax0, ax1, ay0, ay1 = a.footprint()
    bx0, bx1, by0, by1 = b.footprint()
    return interval_overlap(ax0, ax1, bx0, bx1) * interval_overlap(ay0, ay1, by0, by1)


def _top(obj: SimObject) -> float:
    return float(obj.box_max()[2])


def _base(obj: SimObject) -> float:
    return float(obj.box_min()[2])


def _resting_on(objects: Dict[str, SimObject], candidate: SimObject, exclude: set) -> Tuple[float, List[str]]:
    """Highest surface under the candidate footprint and the objects forming it"""
    tops = [
        (_top(o), o.object_id) for o in objects.values()
        if o.object_id not in exclude and _footprint_area(candidate, o) > 0.0
    ]
    if not tops:
        return 0.0, []
    surface = max(t for t, _ in tops)
    return surface, sorted(oid for t, oid in tops if abs(t - surface) <= SETTLE_EPS)


def settle(w: WorldState) -> WorldState:
    """
    Drop every free object onto the highest top beneath it

    Objects are processed bottom-up by (base z, id). Each one lands on the
    highest already-placed top that overlaps its footprint and lies no higher
    than its current base; the held object stays where it is.

    Args:
        w: World state

    Returns:
        Settled world state with the support map rebuilt
    """
    placed: Dict[str, SimObject] = {}
    support: Dict[str, Tuple[str, ...]] = {}
    order = sorted(w.objects.values(), key=lambda o: (_base(o), o.object_id))
    for obj in order:
        if obj.object_id == w.held:
            continue
        base = _base(obj)
        candidates = [
            (_top(o), o.object_id) for o in placed.values()
            if _footprint_area(obj, o) > 0.0 and _top(o) <= base + SETTLE_EPS
        ]
        surface = max((t for t, _ in candidates), default=0.0)
        settled = obj.moved_to(np.array([obj.center[0], obj.center[1], surface + obj.half_extents.z]))
        placed[obj.object_id] = settled
        support[obj.object_id] = tuple(sorted(oid for t, oid in candidates if abs(t - surface) <= SETTLE_EPS))

    objects = {oid: placed.get(oid, obj) for oid, obj in sorted(w.objects.items())}
    on_table = set(w.ever_on_table) | {oid for oid, sup in support.items() if not sup}
    return w.model_copy(update={
        "objects": objects,
        "support": dict(sorted(support.items())),
        "ever_on_table": tuple(sorted(on_table)),
    })


def _supporters_of(w: WorldState, object_id: str) -> List[str]:
    return sorted(oid for oid, sup in w.support.items() if object_id in sup)


def _enclosable(w: WorldState, cup: SimObject, exclude: set) -> List[str]:
    """Objects a cup released at its current pose would close over"""
    cx0, cx1, cy0, cy1 = cup.footprint()
    found = []
    for o in w.objects.values():
        if o.object_id in exclude or o.object_id in w.contained.values():
            continue
        ox0, ox1, oy0, oy1 = o.footprint()
        inside = ox0 >= cx0 and ox1 <= cx1 and oy0 >= cy0 and oy1 <= cy1
        if (
            inside
            and o.half_extents.z < cup.half_extents.z
            and not _supporters_of(w, o.object_id)
            and _top(o) > _base(cup)
        ):
            found.append(o.object_id)
    return sorted(found)


def _land(w: WorldState, subject: SimObject, x: float, y: float) -> Tuple[SimObject, List[str]]:
    trial = subject.moved_to(np.array([x, y, subject.center[2]]))
    exclude = {subject.object_id} | set(w.contained.values())
    surface, supporters = _resting_on(w.objects, trial, exclude)
    return trial.moved_to(np.array([x, y, surface + subject.half_extents.z])), supporters


def apply_action(
    w: WorldState,
    a: Pose6DoFAction,
    subject_id: str,
    cfg: Optional[Settings] = None,
) -> Tuple[WorldState, ActionOutcome]:
    """
    Execute a metric action on the subject

    Args:
        w: World state
        a: Grasp pose, optional release pose, gripper command
        subject_id: Simulator id of the manipulated object
        cfg: Settings override

    Returns:
        (next world state, outcome); failed outcomes return w unchanged

    Raises:
        UnknownObject: subject_id is not in the world
    """
    cfg = cfg or get_settings()
    subject = w.obj(subject_id)
    grasp = a.grasp.position.as_array()
    release = a.release.position.as_array() if a.release is not None else None

    for point in (grasp, release):
        if point is not None and not inside_box(point, cfg.WORKSPACE_MIN, cfg.WORKSPACE_MAX):
            logger.debug(f"{subject_id}: {point.tolist()} outside the workspace")
            return w, ActionOutcome.UNREACHABLE
    if w.held is not None and (w.held != subject_id or release is None):
        return w, ActionOutcome.HAND_FULL
    if w.covered_by(subject_id) is not None:
        return w, ActionOutcome.GRASP_MISS
    if float(np.linalg.norm(grasp - subject.top_center())) > cfg.GRASP_RADIUS:
        return w, ActionOutcome.GRASP_MISS
    if w.held != subject_id and _supporters_of(w, subject_id):
        return w, ActionOutcome.GRASP_MISS

    contained = dict(w.contained)
    contained.pop(subject_id, None)
    objects = dict(w.objects)

    if release is None:
        z = min(subject.center[2] + cfg.LIFT_HEIGHT, view_top(cfg) - subject.half_extents.z)
        objects[subject_id] = subject.moved_to(np.array([subject.center[0], subject.center[1], z]))
        lifted = w.model_copy(update={"objects": objects, "contained": contained, "held": subject_id})
        return _finish(lifted), ActionOutcome.OK

    free = w.model_copy(update={"objects": objects, "contained": contained, "held": None})
    outcome = ActionOutcome.OK
    ever_hidden = set(w.ever_hidden)
    placed: Optional[SimObject] = None

    if subject.kind == ObjectKind.CUP:
        trial = subject.moved_to(release)
        inner = _enclosable(free, trial, {subject_id})
        if len(inner) == 1:
            covered = free.objects[inner[0]]
            placed = subject.moved_to(np.array([release[0], release[1], _base(covered) + subject.half_extents.z]))
            contained[subject_id] = covered.object_id
            ever_hidden.add(covered.object_id)

    if placed is None:
        placed, supporters = _land(free, subject, float(release[0]), float(release[1]))
        if supporters:
            area = subject.half_extents.x * subject.half_extents.y * 4.0
            covered_fraction = sum(_footprint_area(placed, free.objects[s]) for s in supporters) / area
            if covered_fraction < cfg.STABILITY_FRACTION:
                main = max(supporters, key=lambda s: (_footprint_area(placed, free.objects[s]), s))
                base = free.objects[main]
                if release[0] >= base.center[0]:
                    x = base.box_max()[0] + subject.half_extents.x + TOPPLE_CLEARANCE
                else:
                    x = base.box_min()[0] - subject.half_extents.x - TOPPLE_CLEARANCE
                placed, _ = _land(free, subject, float(x), float(release[1]))
                outcome = ActionOutcome.TOPPLED
                logger.info(f"{subject_id} toppled off {main} ({covered_fraction:.2f} supported)")

    objects[subject_id] = placed
    moved = free.model_copy(update={
        "objects": objects,
        "contained": contained,
        "ever_hidden": tuple(sorted(ever_hidden)),
    })
    return _finish(moved), outcome


def _finish(w: WorldState) -> WorldState:
    settled = settle(w)
    return settled.model_copy(update={"step": w.step + 1})


def validate_world(w: WorldState) -> None:
    """
    Check the world invariants

    Raises:
        ValueError: cyclic support, a floating supported object, or interpenetration
    """
    for oid in w.support:
        seen = set()
        stack = [oid]
        while stack:
            current = stack.pop()
            for sup in w.support.get(current, ()):
                if sup == oid:
                    raise ValueError(f"support cycle through {oid}")
                if sup not in seen:
                    seen.add(sup)
                    stack.append(sup)

    for oid, sups in w.support.items():
        base = _base(w.objects[oid])
        surfaces = [0.0] if not sups else [_top(w.objects[s]) for s in sups]
        for surface in surfaces:
            if abs(base - surface) > SETTLE_EPS:
                raise ValueError(f"{oid} base {base:.6f} does not rest on {sups or TABLE} at {surface:.6f}")

    ids = sorted(w.objects)
    enclosed = {frozenset(pair) for pair in w.contained.items()}
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            if frozenset((a, b)) in enclosed:
                continue
            lo = np.maximum(w.objects[a].box_min(), w.objects[b].box_min())
            hi = np.minimum(w.objects[a].box_max(), w.objects[b].box_max())
            if np.all(hi - lo > PENETRATION_EPS):
                raise ValueError(f"{a} and {b} interpenetrate")


def instantiate(task: TaskSpec, seed: int, cfg: Optional[Settings] = None) -> WorldState:
    """
    Initial world of a task for one seed

    Support-connected groups of objects are shifted together by a seeded
    offset of at most SEED_JITTER along x and y.

    Args:
        task: Task description
        seed: Episode seed
        cfg: Settings override

    Returns:
        Settled, validated WorldState
    """
    cfg = cfg or get_settings()
    objects = {
        o.object_id: SimObject(
            object_id=o.object_id,
            descriptor=o.descriptor,
            half_extents=o.half_extents,
            pose=Pose6DoF(position=o.position),
            kind=o.kind,
            color=o.color,
        )
        for o in task.objects
    }
    w = settle(WorldState(objects=dict(sorted(objects.items())), rng_seed=seed))

    parent = {oid: oid for oid in w.objects}

    def find(oid: str) -> str:
        while parent[oid] != oid:
            parent[oid] = parent[parent[oid]]
            oid = parent[oid]
        return oid

    for oid, sups in w.support.items():
        for sup in sups:
            ra, rb = find(oid), find(sup)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

    groups: Dict[str, List[str]] = {}
    for oid in sorted(w.objects):
        groups.setdefault(find(oid), []).append(oid)

    rng = np.random.default_rng(seed)
    shifted = dict(w.objects)
    for root in sorted(groups):
        dx, dy = rng.uniform(-cfg.SEED_JITTER, cfg.SEED_JITTER, size=2)
        for oid in groups[root]:
            obj = shifted[oid]
            shifted[oid] = obj.moved_to(obj.center + np.array([dx, dy, 0.0]))

    w = settle(w.model_copy(update={"objects": shifted, "ever_on_table": ()}))
    validate_world(w)
    return w


def _by_descriptor(w: WorldState, descriptor: str) -> Optional[SimObject]:
    matches = [o for _, o in sorted(w.objects.items()) if o.descriptor == descriptor]
    return matches[0] if matches else None


def evaluate_task(
    w: WorldState,
    task: TaskSpec,
    cfg: Optional[Settings] = None,
    initial: Optional[WorldState] = None,
) -> Tuple[bool, str]:
    """
    Decide task success and explain a failure

    Args:
        w: Final world state
        task: Task description
        cfg: Settings override
        initial: Initial world of the episode (re-instantiated from w.rng_seed when omitted)

    Returns:
        (success, reason)
    """
    cfg = cfg or get_settings()
    tol = cfg.POSITION_TOLERANCE
    if w.held is not None:
        return False, f"{w.held} is still held"

    if task.goal.kind == GoalKind.GOAL_IMAGE:
        for entry in task.goal.goal_scene or ():
            obj = _by_descriptor(w, entry.descriptor)
            if obj is None:
                return False, f"no object matches {entry.descriptor!r}"
            error = float(np.linalg.norm(obj.center - entry.target.as_array()))
            if error > tol:
                return False, f"{entry.descriptor} is {error:.3f} m from its target"
            wanted = set() if tuple(entry.support) == (TABLE,) else set(entry.support)
            actual = {w.objects[s].descriptor for s in w.support.get(obj.object_id, ())}
            if wanted != actual:
                return False, f"{entry.descriptor} rests on {sorted(actual) or TABLE}, expected {sorted(wanted) or TABLE}"
        return True, "goal scene reached"

    start = initial or instantiate(task, w.rng_seed, cfg)
    for oid, obj in sorted(w.objects.items()):
        error = float(np.linalg.norm(obj.center - start.objects[oid].center))
        if error > tol:
            return False, f"{oid} is {error:.3f} m from its original pose"
    program = parse_instruction(task.goal.instruction or "")
    if program is None:
        return False, "instruction is outside the task grammar"
    if program.kind in (InstructionKind.HIDE, InstructionKind.COVER):
        subject = _by_descriptor(w, program.subject or "")
        if subject is None or subject.object_id not in w.ever_hidden:
            return False, f"{program.subject} was never hidden"
    if program.kind == InstructionKind.UNSTACK:
        missing = sorted(set(w.objects) - set(w.ever_on_table))
        if missing:
            return False, f"never unstacked: {', '.join(missing)}"
    return True, "original configuration restored"


def check_success(w: WorldState, task: TaskSpec, cfg: Optional[Settings] = None) -> bool:
    return evaluate_task(w, task, cfg)[0]
