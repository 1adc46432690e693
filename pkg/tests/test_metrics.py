"""Unit tests for image, geometry and consistency metrics."""

import math
from dataclasses import replace

import numpy as np
import pytest
import trimesh

from export.mesh import Mesh
from libs.dataset import save_dataset
from libs.exceptions import MetricsError, ValidationError
from libs.geometry import Camera
from metrics.consistency import (
    NORMALIZED_EDGE,
    asset_consistency,
    depth_consistency,
    depth_view,
    symmetric_chamfer,
    visible_in,
)
from metrics.evaluate import evaluate
from metrics.geometry import (
    floater_area_fraction,
    geometry_cov_mmd,
    mesh_fou,
    one_way_chamfer,
    pointcloud_from_sample,
    surface_samples,
)
from metrics.image import cov_mmd, frechet_distance, mask_fou, masked_psnr, reconstruction_l2
from networks.field import ConstantField, SphereField
from synthetic.generator import generate_samples


def as_mesh(tm: trimesh.Trimesh) -> Mesh:
    return Mesh(np.asarray(tm.vertices, dtype=np.float64), np.asarray(tm.faces, dtype=np.int64))


def two_cubes() -> Mesh:
    a = trimesh.creation.box(extents=(1.0, 1.0, 1.0))
    b = trimesh.creation.box(extents=(1.0, 1.0, 1.0))
    b.apply_translation((3.0, 0.0, 0.0))
    vertices = np.concatenate([a.vertices, b.vertices])
    faces = np.concatenate([a.faces, b.faces + len(a.vertices)])
    return Mesh(vertices.astype(np.float64), faces.astype(np.int64))


@pytest.mark.unit
def test_frechet_shift():
    """Test shifting one set by a unit vector gives a distance of one."""
    emb = np.random.default_rng(0).normal(size=(200, 8))
    shift = np.zeros(8)
    shift[3] = 1.0

    assert abs(frechet_distance(emb, emb + shift) - 1.0) < 1e-6
    assert frechet_distance(emb, emb) < 1e-6


@pytest.mark.unit
def test_frechet_requires_two_vectors():
    """Test a single embedding cannot define a covariance."""
    with pytest.raises(MetricsError):
        frechet_distance(np.zeros((1, 4)), np.zeros((5, 4)))
    with pytest.raises(MetricsError):
        frechet_distance(np.zeros((5, 3)), np.zeros((5, 4)))


@pytest.mark.unit
def test_mask_fou_floater_share():
    """Test an 80-pixel body with a 20-pixel floater scores 20%."""
    alpha = np.zeros((20, 20))
    alpha[0:8, 0:10] = 1.0
    alpha[15:19, 15:20] = 1.0

    assert math.isclose(mask_fou([alpha]), 20.0)


@pytest.mark.unit
def test_mask_fou_single_blob_and_empty():
    """Test one region has no floaters and an empty render counts fully."""
    blob = np.zeros((10, 10))
    blob[2:6, 2:6] = 0.9
    # Diagonal neighbors belong to the same region
    blob[6, 6] = 0.9

    assert mask_fou([blob]) == 0.0
    assert mask_fou([np.zeros((10, 10))]) == 100.0
    assert mask_fou([blob, np.zeros((10, 10))]) == 50.0


@pytest.mark.unit
def test_mask_fou_needs_images():
    """Test an empty list is refused."""
    with pytest.raises(MetricsError):
        mask_fou([])


@pytest.mark.unit
def test_cov_mmd_matching():
    """Test coverage counts matched validation items and MMD averages row minima."""
    distances = np.array(
        [
            [0.0, 5.0, 1.0],
            [3.0, 6.0, 2.0],
        ]
    )

    coverage, mmd = cov_mmd(distances)

    assert coverage == 0.5
    assert math.isclose(mmd, (0.0 + 2.0) / 2)


@pytest.mark.unit
def test_cov_mmd_ties_and_unmatched():
    """Test ties go to the lowest index and all-infinite columns match nothing."""
    distances = np.array([[1.0, np.inf], [1.0, np.inf]])

    coverage, mmd = cov_mmd(distances)

    assert coverage == 0.5
    assert mmd == 1.0


@pytest.mark.unit
def test_reconstruction_error_is_masked():
    """Test errors outside the mask are ignored."""
    target = np.zeros((2, 2, 3))
    prediction = np.zeros((2, 2, 3))
    prediction[0, 0] = 1.0
    prediction[1, 1] = 0.1
    mask = np.array([[0.0, 1.0], [1.0, 1.0]])

    assert math.isclose(reconstruction_l2(prediction, target, mask), 0.01 / 3)
    assert math.isclose(masked_psnr(prediction, target, mask), 10 * math.log10(300.0))
    assert masked_psnr(target, target, mask) == math.inf
    assert math.isnan(reconstruction_l2(prediction, target, np.zeros((2, 2))))


@pytest.mark.unit
def test_point_plane_chamfer():
    """Test points at height d above a plane score about d squared."""
    plane = as_mesh(trimesh.creation.box(extents=(2.0, 2.0, 0.0001)))
    d = 0.2
    grid = np.stack(np.meshgrid(np.linspace(-0.5, 0.5, 10), np.linspace(-0.5, 0.5, 10)), axis=-1).reshape(-1, 2)
    cloud = np.concatenate([grid, np.full((len(grid), 1), d)], axis=1)

    value = one_way_chamfer(cloud, plane)

    assert abs(value - d ** 2) / d ** 2 < 0.05


@pytest.mark.unit
def test_chamfer_empty_mesh_and_cloud():
    """Test an empty mesh is infinitely far and an empty cloud is invalid."""
    assert one_way_chamfer(np.zeros((3, 3)), Mesh.empty()) == math.inf
    assert surface_samples(Mesh.empty()) is None

    with pytest.raises(ValidationError):
        one_way_chamfer(np.zeros((0, 3)), as_mesh(trimesh.creation.box()))


@pytest.mark.unit
def test_geometry_self_coverage():
    """Test validation clouds sampled from the generated meshes are all covered."""
    meshes = [
        as_mesh(trimesh.creation.icosphere(subdivisions=3, radius=0.3)),
        as_mesh(trimesh.creation.box(extents=(1.0, 0.5, 0.25))),
        as_mesh(trimesh.creation.box(extents=(0.2, 0.2, 2.0))),
    ]
    clouds = [surface_samples(m, count=500, seed=7) for m in meshes]

    coverage, mmd = geometry_cov_mmd(clouds, meshes)

    assert coverage == 1.0
    assert mmd < 1e-3


@pytest.mark.unit
def test_geometry_single_mesh_covers_one_cloud():
    """Test one mesh against two identical clouds covers half of them."""
    mesh = as_mesh(trimesh.creation.box())
    cloud = surface_samples(mesh, count=200, seed=1)

    coverage, _ = geometry_cov_mmd([cloud, cloud.copy()], [mesh])

    assert coverage == 0.5


@pytest.mark.unit
def test_geometry_mmd_scales_quadratically():
    """Test doubling every coordinate multiplies MMD by four."""
    mesh = as_mesh(trimesh.creation.icosphere(subdivisions=2, radius=0.5))
    cloud = np.random.default_rng(0).uniform(-1.0, 1.0, size=(100, 3))
    doubled = Mesh(mesh.vertices * 2.0, mesh.faces)

    _, mmd = geometry_cov_mmd([cloud], [mesh])
    _, mmd_doubled = geometry_cov_mmd([cloud * 2.0], [doubled])

    assert math.isclose(mmd_doubled, 4.0 * mmd, rel_tol=1e-6)


@pytest.mark.unit
def test_mesh_fou_two_equal_cubes():
    """Test two disjoint equal cubes put half the area on floaters."""
    assert math.isclose(mesh_fou([two_cubes()]), 50.0)
    assert floater_area_fraction(as_mesh(trimesh.creation.box())) < 1e-12
    assert floater_area_fraction(Mesh.empty()) == 1.0


@pytest.mark.unit
def test_pointcloud_from_sample(tiny_samples):
    """Test back-projected points come from valid depth pixels only."""
    sample = tiny_samples[0]

    cloud = pointcloud_from_sample(sample, n=50, seed=0)

    assert cloud.points.shape == (min(50, int(sample.depth_valid.sum())), 3)
    half = np.asarray(sample.scale) / 2.0 + 1e-3
    assert np.all(np.abs(cloud.points) <= half)


@pytest.mark.unit
def test_symmetric_chamfer():
    """Test the symmetric distance adds both directions."""
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])

    assert math.isclose(symmetric_chamfer(a, b), 1.0 + (1.0 + 4.0) / 2)


@pytest.mark.unit
def test_sphere_consistency(float64):
    """Test a sharp sphere seen from two views yields nearly identical surfaces."""
    camera = Camera.orbit(30.0, 20.0, 1.2, resolution=64)

    value = asset_consistency(SphereField(0.3, density=1000.0), (1.0, 1.0, 1.0), camera, 64, 32)

    assert value is not None
    assert value < 0.05


@pytest.mark.unit
def test_consistency_compares_covisible_surface_only(float64):
    """Test each view keeps only points the rotated view also sees, which the raw clouds would not match."""
    field = SphereField(0.3, density=1000.0)
    extent = (1.0, 1.0, 1.0)
    camera = Camera.orbit(30.0, 20.0, 1.2, resolution=32)
    first = depth_view(field, camera, extent, 64, 32)
    second = depth_view(field, camera.rotated_about_z(45.0), extent, 64, 32)

    seen = visible_in(first.points, second, NORMALIZED_EDGE)

    assert 0 < seen.sum() < len(seen)
    assert visible_in(first.points, first, NORMALIZED_EDGE).all()
    covisible = symmetric_chamfer(first.points[seen], second.points[visible_in(second.points, first, NORMALIZED_EDGE)])
    assert covisible < symmetric_chamfer(first.points, second.points)


@pytest.mark.unit
def test_consistency_without_rotation_is_zero(float64):
    """Test comparing a view with itself gives zero."""
    camera = Camera.orbit(0.0, 20.0, 1.2, resolution=16)

    value = asset_consistency(SphereField(0.3, density=1000.0), (1.0, 1.0, 1.0), camera, 16, 0, rotation_deg=0.0)

    assert value == 0.0


@pytest.mark.unit
def test_consistency_skips_empty_assets():
    """Test assets with no valid depth are skipped and counted."""
    camera = Camera.orbit(0.0, 20.0, 1.2, resolution=8)

    result = depth_consistency([(ConstantField(0.0), (1.0, 1.0, 1.0), camera)], 8)

    assert result.value is None
    assert result.skipped == 1
    assert result.evaluated == 0


@pytest.mark.integration
def test_evaluate_dataset_against_itself(tiny_dataset):
    """Test a dataset evaluated against itself is fully covered and reports missing inputs."""
    report = evaluate(tiny_dataset, tiny_dataset)

    assert report.num_generated == 6
    assert report.num_validation_used == report.num_validation == 6
    assert report.image_cov == 1.0
    assert report.image_mmd == 0.0
    assert report.fid is not None and report.fid >= 0.0
    assert report.consistency is None
    assert "meshes" in report.missing
    assert any(item.startswith("consistency") for item in report.missing)


@pytest.mark.integration
def test_evaluate_filters_dataset_generated_side(tmp_path, tiny_config):
    """Test a dataset used as the generated side drops the same poorly visible samples as validation."""
    samples = generate_samples(6, tiny_config, seed=11, occlusion_prob=0.0)
    samples = [replace(s, visibility=0.3) if i in (1, 4) else s for i, s in enumerate(samples)]
    path = save_dataset(samples, tmp_path / "data", semantic_dim=tiny_config.semantic_dim)

    report = evaluate(path, path)

    assert report.num_validation == 6
    assert report.num_generated == report.num_validation_used == 4
    assert report.image_cov == 1.0
    assert report.image_mmd == 0.0
