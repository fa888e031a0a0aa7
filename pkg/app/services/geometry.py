"""
Geometry service
Depth back-projection, robust centroids, shape statistics and mask/patch overlap
"""
import logging
from typing import Sequence, Tuple

import numpy as np

from app.core.exceptions import DimensionMismatch, EmptyRegion
from app.models.geometry import AxisStats, CameraModel, DepthGrid, Mask, PointCloud, ShapeVector, Vec3

logger = logging.getLogger(__name__)

Rect = Tuple[float, float, float, float]


def _camera_points(cam: CameraModel, u: np.ndarray, v: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Camera-frame points for pixel columns u, rows v at the given depth"""
    x = (u - cam.cx) / cam.fx
    y = (v - cam.cy) / cam.fy
    if cam.projection == "pinhole":
        return np.stack([x * depth, y * depth, depth], axis=-1)
    return np.stack([x, y, depth], axis=-1)


def camera_to_world(cam: CameraModel, points: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ cam.rotation.T + cam.translation


def pixel_to_world(cam: CameraModel, u: float, v: float, depth: float) -> np.ndarray:
    """World point seen at pixel (u, v) with the given sensor depth"""
    point = _camera_points(cam, np.array([float(u)]), np.array([float(v)]), np.array([float(depth)]))
    return camera_to_world(cam, point)[0]


def back_project(mask: Mask, depth: DepthGrid, cam: CameraModel) -> PointCloud:
    """
    Lift the mask pixels with valid depth into a world-frame point cloud

    Args:
        mask: Instance mask
        depth: Depth grid of the same frame
        cam: Camera intrinsics and camera-to-world extrinsic

    Returns:
        PointCloud in row-major scan order of the contributing pixels
    """
    if mask.bits.shape != depth.depth.shape:
        raise DimensionMismatch(f"mask {mask.bits.shape} and depth {depth.depth.shape} differ")
    rows, cols = np.nonzero(mask.bits & depth.valid)
    if rows.size == 0:
        raise EmptyRegion("no mask pixel has valid depth")
    d = depth.depth[rows, cols]
    points = _camera_points(cam, cols.astype(np.float64), rows.astype(np.float64), d)
    return PointCloud(camera_to_world(cam, points), frame="world")


def project_point(cam: CameraModel, point) -> Tuple[float, float, float]:
    """Forward model: world point -> (u, v, sensor depth)"""
    p = np.asarray(point.as_array() if isinstance(point, Vec3) else point, dtype=np.float64)
    x, y, z = cam.rotation.T @ (p - cam.translation)
    if cam.projection == "pinhole":
        return float(cam.fx * x / z + cam.cx), float(cam.fy * y / z + cam.cy), float(z)
    return float(cam.fx * x + cam.cx), float(cam.fy * y + cam.cy), float(z)


def median_centroid(cloud: PointCloud) -> Vec3:
    if len(cloud) == 0:
        raise EmptyRegion("median of an empty point cloud")
    return Vec3.from_array(np.median(cloud.points, axis=0))


def shape_vector(cloud: PointCloud) -> ShapeVector:
    """
    Per-axis population statistics of a point cloud

    Args:
        cloud: Non-empty point cloud

    Returns:
        ShapeVector with (mu, sigma, min, max) per axis; sigma divides by N
    """
    if len(cloud) == 0:
        raise EmptyRegion("shape of an empty point cloud")
    pts = cloud.points
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    # Rounding can push the mean and spread a few ulps past the exact bounds
    mu = np.clip(pts.mean(axis=0), lo, hi)
    sigma = np.minimum(pts.std(axis=0), hi - lo)
    axes = [
        AxisStats(mu=float(mu[i]), sigma=float(sigma[i]), min=float(lo[i]), max=float(hi[i]))
        for i in range(3)
    ]
    return ShapeVector(x=axes[0], y=axes[1], z=axes[2])


def patch_bounds(length: int, grid_n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Start index and size of each patch; the last patch absorbs the remainder"""
    step = length // grid_n
    starts = np.arange(grid_n) * step
    sizes = np.full(grid_n, step)
    sizes[-1] = length - starts[-1]
    return starts, sizes


def patch_sums(values: np.ndarray, grid_n: int) -> np.ndarray:
    """Sum a (H, W, ...) array over each cell of the patch lattice"""
    row_starts, _ = patch_bounds(values.shape[0], grid_n)
    col_starts, _ = patch_bounds(values.shape[1], grid_n)
    return np.add.reduceat(np.add.reduceat(values, row_starts, axis=0), col_starts, axis=1)


def patch_grid_iou(mask: Mask, grid_n: int) -> np.ndarray:
    """
    Fraction of each patch covered by the mask

    Args:
        mask: Instance mask
        grid_n: Patches per side

    Returns:
        (grid_n, grid_n) array of |mask ∩ patch| / |patch|
    """
    if grid_n < 1:
        raise ValueError("grid_n must be at least 1")
    if mask.width < grid_n or mask.height < grid_n:
        raise DimensionMismatch(f"{mask.width}x{mask.height} mask is smaller than a {grid_n}x{grid_n} grid")
    counts = patch_sums(mask.bits.astype(np.int64), grid_n)
    _, row_sizes = patch_bounds(mask.height, grid_n)
    _, col_sizes = patch_bounds(mask.width, grid_n)
    return counts / np.outer(row_sizes, col_sizes)


def euclidean(a: Vec3, b: Vec3) -> float:
    return float(np.linalg.norm(b.as_array() - a.as_array()))


def offset(a: Vec3, b: Vec3) -> Vec3:
    """Directional offset b - a"""
    return Vec3(x=b.x - a.x, y=b.y - a.y, z=b.z - a.z)


def interval_overlap(a_lo: float, a_hi: float, b_lo: float, b_hi: float) -> float:
    return max(0.0, min(a_hi, b_hi) - max(a_lo, b_lo))


def footprint_overlap(a: Rect, b: Rect, degenerate_eps: float = 0.0) -> float:
    """
    Fraction of footprint a covered by footprint b

    An axis on which both rectangles are thinner than degenerate_eps carries no
    information (a single view collapses depth) and is skipped.

    Args:
        a: (x_min, x_max, y_min, y_max) of the supported footprint
        b: (x_min, x_max, y_min, y_max) of the supporting footprint
        degenerate_eps: Extent below which an axis counts as collapsed

    Returns:
        Covered fraction in [0, 1]
    """
    fraction = 1.0
    for a_lo, a_hi, b_lo, b_hi in ((a[0], a[1], b[0], b[1]), (a[2], a[3], b[2], b[3])):
        a_len, b_len = a_hi - a_lo, b_hi - b_lo
        if a_len <= degenerate_eps and b_len <= degenerate_eps:
            continue
        if a_len <= degenerate_eps:
            mid = (a_lo + a_hi) / 2.0
            fraction *= 1.0 if b_lo <= mid <= b_hi else 0.0
            continue
        fraction *= interval_overlap(a_lo, a_hi, b_lo, b_hi) / a_len
    return min(1.0, fraction)


def inside_box(point: Sequence[float], box_min: Sequence[float], box_max: Sequence[float]) -> bool:
    p = np.asarray(point, dtype=np.float64)
    return bool(np.all(p >= np.asarray(box_min)) and np.all(p <= np.asarray(box_max)))
