"""Turntable renders and tiled preview images of generated samples."""

import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from loguru import logger
from PIL import Image

from libs.exceptions import DatasetError
from libs.geometry import Camera, circumradius
from networks.renderer import Field, on_white, render

PathLike = Union[str, Path]

TURNTABLE_VIEWS = 8
TURNTABLE_ELEVATION = 30.0
TURNTABLE_RADIUS = 3.5
SAMPLE_IMAGE = "image.png"
TURNTABLE_IMAGE = "turntable.png"


def turntable_cameras(extent: Sequence[float], resolution: int, views: int = TURNTABLE_VIEWS) -> List[Camera]:
    """Evenly spaced azimuths at a fixed elevation, distance proportional to the box circumradius."""
    radius = TURNTABLE_RADIUS * circumradius(extent)
    return [
        Camera.orbit(360.0 * k / views, TURNTABLE_ELEVATION, radius, resolution=resolution)
        for k in range(views)
    ]


@torch.no_grad()
def render_turntable(
    field: Field,
    extent: Sequence[float],
    resolution: int,
    num_uniform: int,
    num_importance: int = 0,
    views: int = TURNTABLE_VIEWS,
) -> np.ndarray:
    """
    Render a horizontal strip of views around the asset, composited on white.

    Returns:
        (resolution, views * resolution, 3) float array in [0, 1]
    """
    tiles = []
    for camera in turntable_cameras(extent, resolution, views):
        out = render(field, camera, extent, num_uniform, num_importance)
        tiles.append(on_white(out.rgb, out.alpha).double().numpy())
    return np.clip(np.concatenate(tiles, axis=1), 0.0, 1.0)


def to_image(array: np.ndarray) -> Image.Image:
    return Image.fromarray(np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8))


def grid_shape(n: int) -> Tuple[int, int]:
    """(rows, columns) of a near-square grid holding n tiles."""
    cols = math.ceil(math.sqrt(n))
    return math.ceil(n / cols), cols


def tile(images: Sequence[Image.Image]) -> Image.Image:
    """Row-major grid of equally sized tiles on a white canvas; tiles are resized to the first one."""
    rows, cols = grid_shape(len(images))
    width, height = images[0].size
    canvas = Image.new("RGB", (cols * width, rows * height), (255, 255, 255))
    for index, image in enumerate(images):
        if image.size != (width, height):
            image = image.resize((width, height), Image.BILINEAR)
        row, col = divmod(index, cols)
        canvas.paste(image.convert("RGB"), (col * width, row * height))
    return canvas


def sample_directories(samples_dir: PathLike) -> List[Path]:
    """Sample folders holding an image, sorted by name."""
    samples_dir = Path(samples_dir)
    if not samples_dir.is_dir():
        return []
    return sorted(p for p in samples_dir.iterdir() if p.is_dir() and (p / SAMPLE_IMAGE).is_file())


def gallery(samples_dir: PathLike, out_dir: Optional[PathLike] = None) -> Tuple[Path, Optional[Path]]:
    """
    Tile every sample image into gallery.png and stack the turntable strips into turntables.png.

    Args:
        samples_dir: Directory of NNNNNN sample folders
        out_dir: Destination directory, defaults to samples_dir

    Returns:
        Gallery path and turntable path (None when no sample has a turntable)

    Raises:
        DatasetError: If the directory holds no samples
    """
    folders = sample_directories(samples_dir)
    if not folders:
        raise DatasetError("No rendered samples to tile", path=str(samples_dir))
    out_dir = Path(out_dir or samples_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    gallery_path = out_dir / "gallery.png"
    tile([Image.open(p / SAMPLE_IMAGE) for p in folders]).save(gallery_path)

    strips = [Image.open(p / TURNTABLE_IMAGE).convert("RGB") for p in folders if (p / TURNTABLE_IMAGE).is_file()]
    turntable_path = None
    if strips:
        width = max(s.size[0] for s in strips)
        canvas = Image.new("RGB", (width, sum(s.size[1] for s in strips)), (255, 255, 255))
        offset = 0
        for strip in strips:
            canvas.paste(strip, (0, offset))
            offset += strip.size[1]
        turntable_path = out_dir / "turntables.png"
        canvas.save(turntable_path)

    logger.info("Wrote gallery of {} samples to {}", len(folders), gallery_path)
    return gallery_path, turntable_path
