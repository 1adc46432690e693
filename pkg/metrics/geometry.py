"""Mesh metrics: one-way Chamfer against point clouds, geometry coverage and mesh floaters."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import trimesh
from scipy.spatial import cKDTree

from export.mesh import Mesh
from libs.dataset import ObjectSample
from libs.exceptions import MetricsError, ValidationError
from libs.logs import get_num_workers
from metrics.image import cov_mmd

SURFACE_SAMPLES = 10000
CLOUD_POINTS = 2048


@dataclass
class PointCloud:
    """Validation geometry, (N, 3) meters in the object frame."""

    points: np.ndarray
    source: str = ""

    def validate(self) -> None:
        """
        Raises:
            ValidationError: If the cloud is empty or not finite
        """
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) == 0:
            raise ValidationError("Point cloud must be a non-empty N x 3 array", field="points", value=self.points.shape)
        if not np.isfinite(self.points).all():
            raise ValidationError("Point cloud holds non-finite points", field="points")


CloudLike = Union[PointCloud, np.ndarray]


def _as_cloud(cloud: CloudLike) -> PointCloud:
    cloud = cloud if isinstance(cloud, PointCloud) else PointCloud(np.asarray(cloud, dtype=np.float64))
    cloud.validate()
    return cloud


def surface_samples(mesh: Mesh, count: int = SURFACE_SAMPLES, seed: int = 0) -> Optional[np.ndarray]:
    """Area-weighted uniform surface samples, None for an empty mesh."""
    if mesh.is_empty or mesh.area() == 0.0:
        return None
    points, _ = trimesh.sample.sample_surface(mesh.to_trimesh(), count, seed=seed)
    return np.asarray(points, dtype=np.float64)


def _chamfer_to_tree(points: np.ndarray, tree: Optional[cKDTree]) -> float:
    if tree is None:
        return float("inf")
    distances, _ = tree.query(points)
    return float(np.mean(distances ** 2))


def one_way_chamfer(cloud: CloudLike, mesh: Mesh, count: int = SURFACE_SAMPLES, seed: int = 0) -> float:
    """
    Mean squared distance from each cloud point to the mesh surface.

    The surface is represented by ``count`` area-weighted samples drawn with
    ``seed``. Not symmetric: only cloud-to-mesh distances count.

    Returns:
        Distance, or inf for an empty mesh

    Raises:
        ValidationError: If the cloud is empty
    """
    cloud = _as_cloud(cloud)
    surface = surface_samples(mesh, count, seed)
    return _chamfer_to_tree(cloud.points, cKDTree(surface) if surface is not None else None)


def chamfer_matrix(
    clouds: Sequence[CloudLike],
    meshes: Sequence[Mesh],
    count: int = SURFACE_SAMPLES,
    seed: int = 0,
) -> np.ndarray:
    """(validation x generated) one-way Chamfer distances; each mesh is sampled once."""
    clouds = [_as_cloud(c) for c in clouds]

    def column(mesh: Mesh) -> np.ndarray:
        surface = surface_samples(mesh, count, seed)
        tree = cKDTree(surface) if surface is not None else None
        return np.array([_chamfer_to_tree(c.points, tree) for c in clouds])

    with ThreadPoolExecutor(max_workers=get_num_workers()) as pool:
        columns = list(pool.map(column, meshes))
    return np.stack(columns, axis=1) if columns else np.zeros((len(clouds), 0))


def geometry_cov_mmd(
    clouds: Sequence[CloudLike],
    meshes: Sequence[Mesh],
    count: int = SURFACE_SAMPLES,
    seed: int = 0,
) -> Tuple[float, float]:
    """
    Coverage and minimum matching distance of generated meshes against validation clouds.

    Empty meshes sit at infinite distance and never match.

    Raises:
        MetricsError: If either set is empty
    """
    if len(clouds) == 0 or len(meshes) == 0:
        raise MetricsError("Geometry coverage needs non-empty clouds and meshes", metric="geometry_cov")
    return cov_mmd(chamfer_matrix(clouds, meshes, count, seed))


def floater_area_fraction(mesh: Mesh) -> float:
    """Share of surface area outside the largest face-connected component; 1 for an empty mesh."""
    if mesh.is_empty:
        return 1.0
    tm = mesh.to_trimesh()
    areas = tm.area_faces
    total = float(areas.sum())
    if total == 0.0:
        return 1.0
    components = trimesh.graph.connected_components(tm.face_adjacency, nodes=np.arange(len(tm.faces)))
    largest = max(float(areas[c].sum()) for c in components)
    return 1.0 - largest / total


def mesh_fou(meshes: Sequence[Mesh]) -> float:
    """
    Mean percentage of surface area on pieces disconnected from each mesh's main body.

    Raises:
        MetricsError: If no meshes are given
    """
    if len(meshes) == 0:
        raise MetricsError("Mesh FOU needs at least one mesh", metric="mesh_fou")
    return 100.0 * float(np.mean([floater_area_fraction(m) for m in meshes]))


def pointcloud_from_sample(sample: ObjectSample, n: int = CLOUD_POINTS, seed: int = 0) -> PointCloud:
    """
    Back-project the valid depth pixels of a sample and subsample ``n`` of them uniformly.

    Fewer valid pixels than ``n`` keeps them all.

    Raises:
        ValidationError: If the sample has no valid depth
    """
    valid = sample.depth_valid
    if valid is None or not valid.any():
        raise ValidationError("Sample has no valid depth", field="depth", value=sample.sample_id)
    origins, directions = sample.camera.rays()
    flat = valid.reshape(-1)
    depth = sample.depth.reshape(-1)[flat].astype(np.float64)
    points = origins[flat] + depth[:, None] * directions[flat]
    if len(points) > n:
        rng = np.random.default_rng(seed)
        points = points[np.sort(rng.choice(len(points), size=n, replace=False))]
    return PointCloud(points, source=sample.sample_id)
