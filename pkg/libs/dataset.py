"""Object samples and the on-disk dataset format."""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from PIL import Image

from libs.exceptions import DatasetError, ValidationError
from libs.geometry import Camera
from libs.logs import get_num_workers
from libs.schema import Manifest, OccluderSpec, SampleMeta

MANIFEST_NAME = "manifest.json"

PathLike = Union[str, Path]


@dataclass(eq=False)
class ObjectSample:
    """
    One training record.

    Images are (H, W, 3) float32 in [0, 1]; masks are (H, W) bool; depth is
    (H, W) float32 meters with 0 marking invalid pixels; semantic features
    are (H, W, D) float32.
    """

    sample_id: str
    image: np.ndarray
    object_mask: np.ndarray
    skyroad_mask: np.ndarray
    camera: Camera
    scale: np.ndarray
    depth: Optional[np.ndarray] = None
    semantic: Optional[np.ndarray] = None
    class_label: int = 0
    time_of_day: int = 0
    object_kind: Optional[str] = None
    brightness: Optional[float] = None
    occluders: Tuple[OccluderSpec, ...] = ()
    visibility: Optional[float] = None

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]

    @property
    def depth_valid(self) -> Optional[np.ndarray]:
        if self.depth is None:
            return None
        return self.depth > 0

    def validate(self) -> None:
        """
        Check every sample invariant.

        Raises:
            ValidationError: Naming the first violated field
        """
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError("Image must be H x W x 3", field="image", value=self.image.shape)
        if not np.isfinite(self.image).all() or self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValidationError("Image values must lie in [0, 1]", field="image")
        hw = self.image.shape[:2]
        for name in ("object_mask", "skyroad_mask"):
            mask = getattr(self, name)
            if mask.shape != hw:
                raise ValidationError(f"{name} shape does not match image", field=name, value=mask.shape)
        if np.any(self.object_mask & self.skyroad_mask):
            raise ValidationError("object_mask overlaps skyroad_mask", field="skyroad_mask")
        if self.scale.shape != (3,) or not np.isfinite(self.scale).all() or np.any(self.scale <= 0):
            raise ValidationError("Scale components must be positive", field="scale", value=self.scale)
        self.camera.validate()
        if (self.camera.height, self.camera.width) != hw:
            raise ValidationError("Camera resolution does not match image", field="camera")
        _, directions = self.camera.rays()
        if not np.allclose(np.linalg.norm(directions, axis=-1), 1.0, atol=1e-6):
            raise ValidationError("Camera rays are not unit norm", field="camera")
        if self.depth is not None:
            if self.depth.shape != hw:
                raise ValidationError("Depth shape does not match image", field="depth", value=self.depth.shape)
            if not np.isfinite(self.depth).all() or self.depth.min() < 0:
                raise ValidationError("Depth must be finite and nonnegative", field="depth")
        if self.semantic is not None:
            if self.semantic.ndim != 3 or self.semantic.shape[:2] != hw:
                raise ValidationError("Semantic map shape does not match image", field="semantic")

    def to_meta(self) -> SampleMeta:
        return SampleMeta(
            sample_id=self.sample_id,
            camera=self.camera.to_record(),
            scale=tuple(float(s) for s in self.scale),
            class_label=self.class_label,
            time_of_day=self.time_of_day,
            object_kind=self.object_kind,
            brightness=self.brightness,
            occluders=tuple(self.occluders),
            visibility=self.visibility,
            has_depth=self.depth is not None,
            has_semantic=self.semantic is not None,
        )


@dataclass
class ObjectDataset:
    """Samples loaded in manifest order plus the ids that failed validation."""

    samples: List[ObjectSample] = field(default_factory=list)
    rejected: Dict[str, str] = field(default_factory=dict)
    manifest: Manifest = field(default_factory=Manifest)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> ObjectSample:
        return self.samples[index]

    def __iter__(self) -> Iterator[ObjectSample]:
        return iter(self.samples)


def write_raster(path: PathLike, array: np.ndarray) -> None:
    """Write a raster as two little-endian int32 dims (H, W) then float32 data."""
    header = np.asarray(array.shape[:2], dtype="<i4").tobytes()
    Path(path).write_bytes(header + np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_raster(path: PathLike) -> np.ndarray:
    """
    Read a raster written by :func:`write_raster`.

    Returns:
        (H, W) array, or (H, W, C) when the payload holds C values per pixel

    Raises:
        ValidationError: If the payload size does not match the header
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValidationError("Raster header is truncated", field=Path(path).name)
    height, width = (int(d) for d in np.frombuffer(raw[:8], dtype="<i4"))
    values = np.frombuffer(raw[8:], dtype="<f4")
    pixels = height * width
    if pixels <= 0 or values.size % pixels:
        raise ValidationError("Raster payload does not match its header", field=Path(path).name)
    channels = values.size // pixels
    shape = (height, width) if channels == 1 else (height, width, channels)
    return values.reshape(shape).astype(np.float32)


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_sample(sample: ObjectSample, directory: PathLike) -> None:
    """Write one sample folder."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(sample.image)).save(directory / "image.png")
    Image.fromarray(sample.object_mask.astype(np.uint8) * 255).save(directory / "mask.png")
    Image.fromarray(sample.skyroad_mask.astype(np.uint8) * 255).save(directory / "skyroad.png")
    meta = sample.to_meta().model_dump(mode="json")
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    if sample.depth is not None:
        write_raster(directory / "depth.bin", sample.depth)
    if sample.semantic is not None:
        write_raster(directory / "semantic.bin", sample.semantic)


def load_sample(directory: PathLike) -> ObjectSample:
    """
    Read and validate one sample folder.

    Raises:
        DatasetError: If files are missing or unreadable
        ValidationError: If the sample violates an invariant
    """
    directory = Path(directory)
    try:
        meta = SampleMeta.model_validate_json((directory / "meta.json").read_text())
        image = np.asarray(Image.open(directory / "image.png").convert("RGB"), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(directory / "mask.png").convert("L")) > 127
        skyroad = np.asarray(Image.open(directory / "skyroad.png").convert("L")) > 127
    except (OSError, ValueError) as e:
        raise DatasetError(f"Cannot read sample: {e}", sample_id=directory.name, path=str(directory))

    depth = read_raster(directory / "depth.bin") if meta.has_depth else None
    semantic = read_raster(directory / "semantic.bin") if meta.has_semantic else None
    if semantic is not None and semantic.ndim == 2:
        semantic = semantic[..., None]

    sample = ObjectSample(
        sample_id=meta.sample_id,
        image=image,
        object_mask=mask,
        skyroad_mask=skyroad,
        camera=Camera.from_record(meta.camera),
        scale=np.asarray(meta.scale, dtype=np.float64),
        depth=depth,
        semantic=semantic,
        class_label=meta.class_label,
        time_of_day=meta.time_of_day,
        object_kind=meta.object_kind,
        brightness=meta.brightness,
        occluders=meta.occluders,
        visibility=meta.visibility,
    )
    sample.validate()
    return sample


def save_dataset(samples: Sequence[ObjectSample], path: PathLike, semantic_dim: Optional[int] = None) -> Path:
    """
    Write samples and a manifest listing them in order.

    Args:
        samples: Samples to write; their ids name the folders
        path: Dataset directory
        semantic_dim: Channel count recorded in the manifest

    Returns:
        Dataset directory
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        save_sample(sample, path / sample.sample_id)

    resolution = samples[0].resolution[0] if samples else None
    manifest = Manifest(
        samples=[s.sample_id for s in samples],
        image_resolution=resolution,
        semantic_dim=semantic_dim,
    )
    (path / MANIFEST_NAME).write_text(json.dumps(manifest.model_dump(mode="json"), indent=2))
    return path


def load_dataset(path: PathLike) -> ObjectDataset:
    """
    Load every valid sample listed in the manifest, in manifest order.

    Args:
        path: Dataset directory

    Returns:
        Dataset with valid samples and a map of rejected ids to reasons

    Raises:
        DatasetError: If the manifest is missing or malformed
    """
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetError("Dataset manifest not found", path=str(manifest_path))
    try:
        manifest = Manifest.model_validate_json(manifest_path.read_text())
    except ValueError as e:
        raise DatasetError(f"Malformed manifest: {e}", path=str(manifest_path))

    def load_one(sample_id: str) -> Tuple[str, Optional[ObjectSample], Optional[str]]:
        try:
            return sample_id, load_sample(path / sample_id), None
        except (DatasetError, ValidationError) as e:
            return sample_id, None, e.message

    dataset = ObjectDataset(manifest=manifest)
    with ThreadPoolExecutor(max_workers=get_num_workers()) as pool:
        for sample_id, sample, reason in pool.map(load_one, manifest.samples):
            if sample is None:
                logger.warning("Rejected sample {}: {}", sample_id, reason)
                dataset.rejected[sample_id] = reason
            else:
                dataset.samples.append(sample)

    logger.info("Loaded {} samples from {} ({} rejected)", len(dataset.samples), path, len(dataset.rejected))
    return dataset
