"""Unit tests for mesh extraction and asset files."""

import math

import numpy as np
import pytest
import trimesh

from export.io import export_asset, load_asset
from export.mesh import Mesh, extract_mesh
from libs.exceptions import ExportError, ValidationError
from networks.field import ConstantField, SphereField

RADIUS = 0.3
UNIT_BOX = (1.0, 1.0, 1.0)


@pytest.fixture
def ramp_sphere() -> SphereField:
    return SphereField(RADIUS, profile="ramp", level=10.0)


@pytest.fixture
def unit_cube() -> Mesh:
    cube = trimesh.creation.box(extents=(1.0, 1.0, 1.0))
    return Mesh(np.asarray(cube.vertices, dtype=np.float64), np.asarray(cube.faces, dtype=np.int64))


def max_radial_error(mesh: Mesh) -> float:
    return float(np.abs(np.linalg.norm(mesh.vertices, axis=1) - RADIUS).max())


@pytest.mark.unit
def test_sphere_area(ramp_sphere):
    """Test the extracted sphere's area is within 5% of 4 pi r^2."""
    mesh = extract_mesh(ramp_sphere, UNIT_BOX, resolution=64, threshold=10.0)

    expected = 4.0 * math.pi * RADIUS ** 2
    assert abs(mesh.area() - expected) / expected < 0.05


@pytest.mark.unit
def test_sphere_vertices_near_surface(ramp_sphere):
    """Test every vertex lies within one lattice step of the sphere."""
    mesh = extract_mesh(ramp_sphere, UNIT_BOX, resolution=32)

    assert max_radial_error(mesh) <= 1.0 / 31


@pytest.mark.unit
def test_refinement_reduces_error(ramp_sphere):
    """Test a finer lattice follows the surface more closely."""
    coarse = extract_mesh(ramp_sphere, UNIT_BOX, resolution=12)
    fine = extract_mesh(ramp_sphere, UNIT_BOX, resolution=48)

    assert max_radial_error(fine) < max_radial_error(coarse)


@pytest.mark.unit
def test_interior_surface_is_closed(ramp_sphere):
    """Test a surface strictly inside the box has every edge shared by two faces."""
    mesh = extract_mesh(ramp_sphere, UNIT_BOX, resolution=24)

    edges = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)

    assert not mesh.is_empty
    assert np.all(counts == 2)


@pytest.mark.unit
def test_vertex_colors(ramp_sphere):
    """Test colored extraction attaches the field color to each vertex."""
    mesh = extract_mesh(ramp_sphere, UNIT_BOX, resolution=16, with_colors=True)

    assert mesh.colors.shape == mesh.vertices.shape
    assert np.allclose(mesh.colors, [0.8, 0.2, 0.2], atol=1e-6)


@pytest.mark.unit
def test_no_crossing_gives_empty_mesh():
    """Test a field below the threshold everywhere yields an empty mesh."""
    mesh = extract_mesh(ConstantField(1.0), UNIT_BOX, resolution=8)

    assert mesh.is_empty
    assert mesh.area() == 0.0


@pytest.mark.unit
def test_resolution_minimum(ramp_sphere):
    """Test lattices coarser than 8 points per axis are rejected."""
    with pytest.raises(ValidationError):
        extract_mesh(ramp_sphere, UNIT_BOX, resolution=4)


@pytest.mark.unit
@pytest.mark.parametrize("suffix", ["obj", "ply"])
def test_unit_cube_round_trip(tmp_path, unit_cube, suffix):
    """Test a unit cube reads back with the same vertices, faces and volume."""
    path = export_asset(unit_cube, tmp_path / f"cube.{suffix}")

    loaded = load_asset(path)

    assert np.allclose(loaded.vertices, unit_cube.vertices)
    assert np.array_equal(loaded.faces, unit_cube.faces)
    assert loaded.colors is None
    assert loaded.to_trimesh().volume == pytest.approx(1.0)


@pytest.mark.unit
@pytest.mark.parametrize("suffix", ["obj", "ply"])
def test_written_files_open_in_trimesh(tmp_path, ramp_sphere, suffix):
    """Test exported files load as a plain trimesh with matching counts."""
    mesh = extract_mesh(ramp_sphere, UNIT_BOX, resolution=16, with_colors=True)
    path = export_asset(mesh, tmp_path / f"sphere.{suffix}")

    loaded = trimesh.load(str(path), process=False, force="mesh")

    assert len(loaded.vertices) == len(mesh.vertices)
    assert len(loaded.faces) == len(mesh.faces)
    assert loaded.visual.kind == "vertex"


@pytest.mark.unit
def test_obj_colors_round_trip(tmp_path, unit_cube):
    """Test OBJ vertex colors come back within one 8-bit step."""
    colors = np.linspace(0.0, 1.0, len(unit_cube.vertices) * 3).reshape(-1, 3)
    colored = Mesh(unit_cube.vertices, unit_cube.faces, colors)

    loaded = load_asset(export_asset(colored, tmp_path / "cube.obj"))

    assert loaded.colors is not None
    assert np.abs(loaded.colors - colors).max() <= 1.0 / 255 + 1e-9


@pytest.mark.unit
def test_missing_and_unreadable_files(tmp_path):
    """Test missing or corrupt asset files raise ExportError naming the format."""
    with pytest.raises(ExportError, match="not found"):
        load_asset(tmp_path / "absent.ply")

    corrupt = tmp_path / "corrupt.ply"
    corrupt.write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 9\n")
    with pytest.raises(ExportError) as exc_info:
        load_asset(corrupt)
    assert exc_info.value.format == "ply"


@pytest.mark.unit
def test_ply_colors_are_bytes(tmp_path, unit_cube):
    """Test PLY colors come back quantized to 8 bits."""
    colored = Mesh(unit_cube.vertices, unit_cube.faces, np.full_like(unit_cube.vertices, 0.5))

    loaded = load_asset(export_asset(colored, tmp_path / "cube.ply"))

    assert np.allclose(loaded.colors, 128 / 255)


@pytest.mark.unit
@pytest.mark.parametrize("suffix", ["obj", "ply"])
def test_empty_mesh_file(tmp_path, suffix):
    """Test an empty mesh still writes a readable file."""
    path = export_asset(Mesh.empty(), tmp_path / f"empty.{suffix}")

    loaded = load_asset(path)

    assert path.stat().st_size > 0
    assert loaded.is_empty


@pytest.mark.unit
def test_unsupported_format(tmp_path, unit_cube):
    """Test unknown formats are refused with the format named."""
    with pytest.raises(ExportError) as exc_info:
        export_asset(unit_cube, tmp_path / "cube.stl")

    assert exc_info.value.format == "stl"


@pytest.mark.unit
def test_malformed_mesh_rejected(tmp_path):
    """Test faces pointing past the vertex list are rejected before writing."""
    mesh = Mesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))

    with pytest.raises(ValidationError):
        export_asset(mesh, tmp_path / "bad.obj")
    assert not (tmp_path / "bad.obj").exists()
