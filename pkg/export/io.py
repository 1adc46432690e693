"""OBJ and binary PLY asset files for extracted meshes."""

from pathlib import Path
from typing import Optional, Union

import numpy as np
import trimesh
from loguru import logger

from export.mesh import Mesh
from libs.exceptions import ExportError

PathLike = Union[str, Path]

SUPPORTED_FORMATS = ("obj", "ply")

# trimesh has no representation for a mesh without vertices
EMPTY_FILES = {
    "obj": b"# empty mesh\n",
    "ply": b"ply\nformat ascii 1.0\nelement vertex 0\nelement face 0\nend_header\n",
}


def _format_of(path: Path, format: Optional[str]) -> str:
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt not in SUPPORTED_FORMATS:
        raise ExportError(f"Unsupported asset format '{fmt}'", format=fmt)
    return fmt


def from_trimesh(tm: trimesh.Trimesh) -> Mesh:
    """Mesh from a trimesh object, keeping vertex colors when the file carried them."""
    colors = None
    if tm.visual.kind == "vertex":
        colors = np.asarray(tm.visual.vertex_colors, dtype=np.float64)[:, :3] / 255.0
    return Mesh(
        np.asarray(tm.vertices, dtype=np.float64).reshape(-1, 3),
        np.asarray(tm.faces, dtype=np.int64).reshape(-1, 3),
        colors,
    )


def export_asset(mesh: Mesh, path: PathLike, format: Optional[str] = None) -> Path:
    """
    Write a mesh as OBJ or binary PLY.

    Colors are quantized to 8 bits per channel.

    Args:
        mesh: Valid mesh; an empty mesh produces a valid empty file
        path: Destination file
        format: "obj" or "ply"; inferred from the suffix when omitted

    Returns:
        Written path

    Raises:
        ExportError: If the format is not supported or the writer fails
        ValidationError: If the mesh is malformed
    """
    path = Path(path)
    fmt = _format_of(path, format)
    mesh.validate()
    path.parent.mkdir(parents=True, exist_ok=True)
    if len(mesh.vertices) == 0:
        path.write_bytes(EMPTY_FILES[fmt])
    else:
        try:
            mesh.to_trimesh().export(str(path), file_type=fmt)
        except (OSError, ValueError) as e:
            raise ExportError(f"Cannot write {fmt.upper()} file {path}: {e}", format=fmt)
    logger.info("Exported {} vertices, {} faces to {}", len(mesh.vertices), len(mesh.faces), path)
    return path


def load_asset(path: PathLike, format: Optional[str] = None) -> Mesh:
    """
    Read a mesh written by :func:`export_asset`.

    Raises:
        ExportError: If the file is unreadable, holds no triangle mesh or the format is unsupported
    """
    path = Path(path)
    fmt = _format_of(path, format)
    if not path.is_file():
        raise ExportError(f"Asset file not found: {path}", format=fmt)
    if path.read_bytes() == EMPTY_FILES[fmt]:
        return Mesh.empty()

    try:
        loaded = trimesh.load(str(path), file_type=fmt, process=False, force="mesh")
    except Exception as e:
        raise ExportError(f"Cannot read {fmt.upper()} file {path}: {e}", format=fmt)
    if not isinstance(loaded, trimesh.Trimesh) or len(loaded.faces) == 0:
        raise ExportError(f"{path} holds no triangle mesh", format=fmt)

    mesh = from_trimesh(loaded)
    mesh.validate()
    return mesh
