"""Depth consistency of rendered assets across two viewpoints."""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger
from scipy.spatial import cKDTree

from libs.geometry import Camera
from networks.renderer import Field, render

ROTATION_DEG = 45.0
NORMALIZED_EDGE = 10.0
ALPHA_THRESHOLD = 0.5
# Depth agreement, in normalized units, for a point to count as seen by the other view
VISIBILITY_TOLERANCE = 0.5


@dataclass
class DepthView:
    """Back-projected surface of one rendered view, in normalized object units."""

    camera: Camera
    points: np.ndarray
    depth: np.ndarray
    valid: np.ndarray


@dataclass
class ConsistencyResult:
    value: Optional[float]
    evaluated: int
    skipped: int


@torch.no_grad()
def depth_view(
    field: Field,
    camera: Camera,
    extent: Sequence[float],
    num_uniform: int,
    num_importance: int = 0,
) -> DepthView:
    """
    Render a depth map and back-project the pixels with alpha above 0.5.

    Depth is the expected termination distance divided by opacity, so
    partially transparent pixels land on the surface they render.
    Coordinates are scaled so the longest box edge measures 10.
    """
    out = render(field, camera, extent, num_uniform, num_importance)
    alpha = out.alpha.double().numpy().reshape(-1)
    valid = alpha > ALPHA_THRESHOLD
    depth = np.zeros_like(alpha)
    depth[valid] = out.depth.double().numpy().reshape(-1)[valid] / alpha[valid]

    factor = NORMALIZED_EDGE / float(np.max(extent))
    origins, directions = camera.rays()
    points = (origins[valid] + depth[valid, None] * directions[valid]) * factor
    return DepthView(camera, points, depth * factor, valid)


def visible_in(points: np.ndarray, view: DepthView, factor: float) -> np.ndarray:
    """
    Which normalized points project onto a valid pixel of ``view`` at a depth matching its surface.

    Consistency compares only the surface both views see; parts visible
    from one view alone are left out of the Chamfer distance.
    """
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    camera = view.camera
    pixels, z = camera.project(points / factor)
    with np.errstate(invalid="ignore"):
        cols = np.floor(pixels[:, 0])
        rows = np.floor(pixels[:, 1])
    inside = (z > 0) & (cols >= 0) & (cols < camera.width) & (rows >= 0) & (rows < camera.height)
    keep = np.zeros(len(points), dtype=bool)
    index = (rows[inside] * camera.width + cols[inside]).astype(np.int64)
    distance = np.linalg.norm(points[inside] / factor - camera.translation, axis=1) * factor
    keep[inside] = view.valid[index] & (np.abs(distance - view.depth[index]) <= VISIBILITY_TOLERANCE)
    return keep


def symmetric_chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of the two mean squared nearest-neighbor distances."""
    a_to_b, _ = cKDTree(b).query(a)
    b_to_a, _ = cKDTree(a).query(b)
    return float(np.mean(a_to_b ** 2) + np.mean(b_to_a ** 2))


def asset_consistency(
    field: Field,
    extent: Sequence[float],
    camera: Camera,
    num_uniform: int,
    num_importance: int = 0,
    rotation_deg: float = ROTATION_DEG,
) -> Optional[float]:
    """
    Chamfer distance between the surfaces two views of one asset agree to see.

    The second camera is the first rotated by ``rotation_deg`` about the
    object's z axis. Each view keeps the points the other view also sees.

    Returns:
        Distance in normalized units squared, or None when a view has no valid pixels
    """
    factor = NORMALIZED_EDGE / float(np.max(extent))
    first = depth_view(field, camera, extent, num_uniform, num_importance)
    second = depth_view(field, camera.rotated_about_z(rotation_deg), extent, num_uniform, num_importance)
    if len(first.points) == 0 or len(second.points) == 0:
        return None
    a = first.points[visible_in(first.points, second, factor)]
    b = second.points[visible_in(second.points, first, factor)]
    if len(a) == 0 or len(b) == 0:
        return None
    return symmetric_chamfer(a, b)


def depth_consistency(
    assets: Sequence[Tuple[Field, Sequence[float], Camera]],
    num_uniform: int,
    num_importance: int = 0,
    rotation_deg: float = ROTATION_DEG,
) -> ConsistencyResult:
    """
    Mean two-view depth consistency over assets given as (field, extent, camera).

    Assets without valid depth in either view are skipped and counted.
    """
    values = []
    skipped = 0
    for field, extent, camera in assets:
        value = asset_consistency(field, extent, camera, num_uniform, num_importance, rotation_deg)
        if value is None:
            skipped += 1
        else:
            values.append(value)
    if skipped:
        logger.warning("Skipped {} of {} assets without valid depth", skipped, len(assets))
    mean = float(np.mean(values)) if values else None
    return ConsistencyResult(mean, len(values), skipped)
