"""Isosurface extraction of radiance-field density."""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import trimesh
from loguru import logger
from skimage import measure

from libs.exceptions import ValidationError
from networks.field import FieldOutput

Field = Callable[[torch.Tensor], FieldOutput]

DEFAULT_THRESHOLD = 10.0


@dataclass
class Mesh:
    """Triangle mesh in the object frame with optional per-vertex colors in [0, 1]."""

    vertices: np.ndarray
    faces: np.ndarray
    colors: Optional[np.ndarray] = None

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def validate(self) -> None:
        """
        Raises:
            ValidationError: If faces reference missing vertices or shapes are malformed
        """
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValidationError("Vertices must be V x 3", field="vertices", value=self.vertices.shape)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValidationError("Faces must be F x 3", field="faces", value=self.faces.shape)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValidationError("Face index out of range", field="faces")
        if self.colors is not None and self.colors.shape != self.vertices.shape:
            raise ValidationError("Colors must be V x 3", field="colors", value=self.colors.shape)

    def to_trimesh(self) -> trimesh.Trimesh:
        colors = None
        if self.colors is not None:
            colors = np.round(np.clip(self.colors, 0.0, 1.0) * 255).astype(np.uint8)
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, vertex_colors=colors, process=False)

    def area(self) -> float:
        if self.is_empty:
            return 0.0
        return float(self.to_trimesh().area)


@torch.no_grad()
def density_grid(field: Field, extent: Sequence[float], resolution: int, chunk: int = 65536) -> np.ndarray:
    """Density sampled on a resolution^3 lattice spanning the box [-extent/2, extent/2], indexed [x, y, z]."""
    extent = np.asarray(extent, dtype=np.float64)
    axes = [np.linspace(-e / 2.0, e / 2.0, resolution) for e in extent]
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    dtype = torch.get_default_dtype()
    sigma = []
    for start in range(0, len(points), chunk):
        batch = torch.from_numpy(points[start:start + chunk]).to(dtype)
        sigma.append(field(batch).sigma.double().numpy())
    return np.concatenate(sigma).reshape(resolution, resolution, resolution)


@torch.no_grad()
def vertex_colors(field: Field, vertices: np.ndarray) -> np.ndarray:
    """Field color at each vertex."""
    if len(vertices) == 0:
        return np.zeros((0, 3))
    out = field(torch.from_numpy(vertices).to(torch.get_default_dtype()))
    return out.rgb.double().numpy()


def extract_mesh(
    field: Field,
    extent: Union[Sequence[float], np.ndarray],
    resolution: int = 64,
    threshold: float = DEFAULT_THRESHOLD,
    with_colors: bool = False,
) -> Mesh:
    """
    Marching cubes on the field's density at ``threshold``.

    Vertices are interpolated linearly along lattice edges. A field that
    never crosses the threshold gives an empty mesh.

    Args:
        field: Radiance field
        extent: Box extents the lattice spans
        resolution: Lattice points per axis, at least 8
        threshold: Density isovalue
        with_colors: Attach field colors at the vertices

    Raises:
        ValidationError: If the resolution is below 8
    """
    if resolution < 8:
        raise ValidationError("Mesh resolution must be at least 8", field="resolution", value=resolution)
    extent = np.asarray(extent, dtype=np.float64)
    grid = density_grid(field, extent, resolution)
    if not (grid.min() < threshold < grid.max()):
        logger.info("Density never crosses {} inside the box, mesh is empty", threshold)
        return Mesh.empty()

    spacing = tuple(extent / (resolution - 1))
    vertices, faces, _, _ = measure.marching_cubes(grid, level=threshold, spacing=spacing, allow_degenerate=False)
    vertices = vertices.astype(np.float64) - extent / 2.0
    faces = faces.astype(np.int64)
    colors = vertex_colors(field, vertices) if with_colors else None
    return Mesh(vertices, faces, colors)
