"""
STF-Token encoder
Fuses selected patch evidence with centroid, shape vector and timestamp, and renders tokens as text
"""
import logging
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Dict, Optional

import numpy as np

from app.core.config import Settings, get_settings
from app.core.exceptions import DimensionMismatch, EmptyRegion
from app.models.geometry import AxisStats, CameraModel, DepthGrid, Mask, ShapeVector, Vec3
from app.models.tokens import PatchFeatureGrid, SelectedPatch, StfToken, TokenSummary, VisualEvidence
from app.services.geometry import (
    back_project,
    median_centroid,
    patch_bounds,
    patch_grid_iou,
    patch_sums,
    pixel_to_world,
    shape_vector,
)

logger = logging.getLogger(__name__)

TOKEN_HEADER = "stf/1"


def patch_feature_grid(rgb: np.ndarray, grid_n: int) -> PatchFeatureGrid:
    """
    Synthetic patch descriptors: mean colour in [0, 1] plus normalised patch centre

    Args:
        rgb: (height, width, 3) uint8 image
        grid_n: Patches per side

    Returns:
        PatchFeatureGrid with 5-dim features (r, g, b, row centre, column centre)
    """
    image = np.asarray(rgb)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionMismatch(f"expected an (H, W, 3) image, got {image.shape}")
    height, width = image.shape[:2]
    if width < grid_n or height < grid_n:
        raise DimensionMismatch(f"{width}x{height} image is smaller than a {grid_n}x{grid_n} grid")
    row_starts, row_sizes = patch_bounds(height, grid_n)
    col_starts, col_sizes = patch_bounds(width, grid_n)
    area = np.outer(row_sizes, col_sizes)[:, :, None]
    colour = patch_sums(image.astype(np.float64), grid_n) / area / 255.0
    row_centre = (row_starts + row_sizes / 2.0) / height
    col_centre = (col_starts + col_sizes / 2.0) / width
    rows, cols = np.meshgrid(row_centre, col_centre, indexing="ij")
    features = np.concatenate([colour, rows[:, :, None], cols[:, :, None]], axis=2)
    return PatchFeatureGrid(grid_n=grid_n, features=features, source_dims=(width, height))


def select_patches(grid: PatchFeatureGrid, mask: Mask, iou_threshold: float) -> VisualEvidence:
    """
    Keep the patches the mask covers by more than iou_threshold

    Args:
        grid: Patch features of the frame
        mask: Instance mask of the same frame
        iou_threshold: Coverage threshold in [0, 1]

    Returns:
        VisualEvidence; when no patch passes, the best-scoring one with fallback set
    """
    if tuple(grid.source_dims) != (mask.width, mask.height):
        raise DimensionMismatch(f"grid built for {grid.source_dims}, mask is {(mask.width, mask.height)}")
    scores = patch_grid_iou(mask, grid.grid_n)
    rows, cols = np.nonzero(scores > iou_threshold)
    fallback = rows.size == 0
    if fallback:
        # argmax returns the first maximum in row-major order
        best = int(np.argmax(scores))
        rows, cols = np.array([best // grid.grid_n]), np.array([best % grid.grid_n])
    selected = grid.features[rows, cols]
    patches = tuple(
        SelectedPatch(row=int(r), col=int(c), feature=tuple(float(x) for x in f))
        for r, c, f in zip(rows, cols, selected)
    )
    aggregate = tuple(float(x) for x in selected.mean(axis=0))
    return VisualEvidence(selected_patches=patches, aggregate=aggregate, fallback=fallback)


def _degraded_geometry(mask: Mask, cam: CameraModel, naive_depth: float):
    """Centroid and flat shape from the 2D box of the mask at a fixed depth"""
    if mask.popcount() == 0:
        raise EmptyRegion("mask is empty")
    u0, u1, v0, v1 = mask.bounding_box()
    centre = pixel_to_world(cam, (u0 + u1) / 2.0, (v0 + v1) / 2.0, naive_depth)
    corners = np.stack([pixel_to_world(cam, u0, v0, naive_depth), pixel_to_world(cam, u1, v1, naive_depth)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    axes = [
        AxisStats(mu=float(centre[i]), sigma=0.0, min=float(lo[i]), max=float(hi[i]))
        for i in range(3)
    ]
    return Vec3.from_array(centre), ShapeVector(x=axes[0], y=axes[1], z=axes[2])


def build_token(
    object_id: str,
    descriptor: str,
    mask: Mask,
    depth: DepthGrid,
    cam: CameraModel,
    grid: PatchFeatureGrid,
    t: int,
    cfg: Optional[Settings] = None,
    *,
    degrade_geometry: bool = False,
    provenance: str = "",
) -> StfToken:
    """
    Encode one object observation into an STF-Token

    Args:
        object_id: Identifier to stamp on the token
        descriptor: Open-vocabulary label
        mask: Instance mask
        depth: Depth grid of the frame
        cam: Camera model of the frame
        grid: Patch features of the frame
        t: Step index
        cfg: Settings override
        degrade_geometry: Replace metric geometry by the 2D-box estimate at NAIVE_DEPTH
        provenance: Mask key the token was built from

    Returns:
        StfToken

    Raises:
        EmptyRegion: the mask has no usable pixel (object not observed this step)
    """
    cfg = cfg or get_settings()
    if degrade_geometry:
        centroid, shape = _degraded_geometry(mask, cam, cfg.NAIVE_DEPTH)
    else:
        cloud = back_project(mask, depth, cam)
        centroid, shape = median_centroid(cloud), shape_vector(cloud)
    evidence = select_patches(grid, mask, cfg.STF_IOU_THRESHOLD)
    return StfToken(
        object_id=object_id,
        descriptor=descriptor,
        evidence=evidence,
        centroid=centroid,
        shape=shape,
        timestamp=t,
        provenance=provenance or object_id,
    )


def format_number(value: float, precision: int) -> str:
    """Fixed-point rendering with round-half-even; negative zero prints as zero"""
    quantum = Decimal(1).scaleb(-precision)
    q = Decimal(str(float(value))).quantize(quantum, rounding=ROUND_HALF_EVEN)
    if q == 0:
        q = q.copy_abs()
    return format(q, "f")


def serialize_token(token: StfToken, precision: Optional[int] = None) -> str:
    """
    Line-oriented "stf/1" rendering of a token

    Args:
        token: Token to render
        precision: Decimal places (STF_SERIAL_PRECISION when omitted)

    Returns:
        Text block without a trailing newline
    """
    if precision is None:
        precision = get_settings().STF_SERIAL_PRECISION

    def nums(*values: float) -> str:
        return " ".join(format_number(v, precision) for v in values)

    lines = [
        TOKEN_HEADER,
        f"object_id: {token.object_id}",
        f"descriptor: {token.descriptor}",
        f"timestamp: {token.timestamp}",
        f"centroid: {nums(*token.centroid.as_tuple())}",
    ]
    for name, axis in zip("xyz", token.shape.axes()):
        lines.append(f"shape.{name}: {nums(axis.mu, axis.sigma, axis.min, axis.max)}")
    evidence = token.evidence
    lines.append(
        f"evidence: patches={len(evidence.selected_patches)} "
        f"norm={nums(evidence.aggregate_norm())} fallback={int(evidence.fallback)}"
    )
    return "\n".join(lines)


def parse_token_text(text: str) -> TokenSummary:
    """
    Recover the fields of a serialized token

    Args:
        text: Output of serialize_token

    Returns:
        TokenSummary
    """
    lines = [line.strip() for line in text.strip().splitlines() if line.strip()]
    if not lines or lines[0] != TOKEN_HEADER:
        raise ValueError(f"token text must start with {TOKEN_HEADER!r}")
    fields: Dict[str, str] = {}
    for line in lines[1:]:
        key, sep, value = line.partition(":")
        if not sep:
            raise ValueError(f"Malformed token line: {line!r}")
        fields[key.strip()] = value.strip()

    def floats(key: str):
        return [float(v) for v in fields[key].split()]

    try:
        axes = []
        for name in "xyz":
            mu, sigma, lo, hi = floats(f"shape.{name}")
            axes.append(AxisStats(mu=mu, sigma=sigma, min=lo, max=hi))
        evidence = dict(part.split("=", 1) for part in fields["evidence"].split())
        return TokenSummary(
            object_id=fields["object_id"],
            descriptor=fields["descriptor"],
            timestamp=int(fields["timestamp"]),
            centroid=Vec3.from_array(floats("centroid")),
            shape=ShapeVector(x=axes[0], y=axes[1], z=axes[2]),
            patch_count=int(evidence["patches"]),
            aggregate_norm=float(evidence["norm"]),
            fallback=evidence["fallback"] == "1",
        )
    except (KeyError, ValueError) as e:
        raise ValueError(f"Malformed token text: {e}") from e
