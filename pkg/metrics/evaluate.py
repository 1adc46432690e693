"""Full evaluation of a generated set against a validation dataset."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import torch
from loguru import logger

from backends.base import get_embedding_backend
from export.artifacts import RunLayout, generated_directories, load_generated
from export.io import load_asset
from export.mesh import Mesh
from libs.dataset import ObjectSample, load_dataset
from libs.exceptions import GinaError, MetricsError
from libs.geometry import Camera, box_extent
from libs.schema import MetricsReport
from metrics.consistency import ConsistencyResult, depth_consistency
from metrics.geometry import geometry_cov_mmd, mesh_fou, pointcloud_from_sample
from metrics.image import cov_mmd_embeddings, frechet_distance, mask_fou
from training.stage1 import Stage1State

PathLike = Union[str, Path]

MIN_VISIBILITY = 0.5


@dataclass
class GeneratedSet:
    """Images, alphas and optional decodable assets found on the generated side."""

    images: List[np.ndarray] = field(default_factory=list)
    alphas: List[np.ndarray] = field(default_factory=list)
    tokens: List[np.ndarray] = field(default_factory=list)
    cameras: List[Camera] = field(default_factory=list)
    extents: List[np.ndarray] = field(default_factory=list)
    meshes: List[Mesh] = field(default_factory=list)
    checkpoint: Optional[Path] = None


def on_white(sample: ObjectSample) -> np.ndarray:
    """Sample image with every non-object pixel replaced by white."""
    mask = sample.object_mask[..., None].astype(np.float64)
    return sample.image.astype(np.float64) * mask + (1.0 - mask)


def visible_enough(sample: ObjectSample, min_visibility: float) -> bool:
    """Samples without a recorded visibility are kept."""
    return sample.visibility is None or sample.visibility >= min_visibility


def load_generated_set(path: PathLike, min_visibility: float = MIN_VISIBILITY) -> GeneratedSet:
    """
    Collect the generated side from a run directory or a plain dataset directory.

    Dataset samples go through the same visibility filter as the validation
    side; generated run samples carry no visibility and are all kept.

    Raises:
        MetricsError: If nothing generated is found
    """
    path = Path(path)
    layout = RunLayout(path)
    result = GeneratedSet()
    if layout.is_run():
        for directory in generated_directories(layout.samples):
            sample = load_generated(directory)
            result.images.append(sample.image)
            result.alphas.append(sample.alpha)
            result.tokens.append(sample.tokens)
            result.cameras.append(Camera.from_record(sample.meta.camera))
            result.extents.append(np.asarray(sample.meta.scale, dtype=np.float64))
        if layout.meshes.is_dir():
            result.meshes = [load_asset(p) for p in sorted(layout.meshes.glob("*.obj"))]
        if layout.stage1.is_file():
            result.checkpoint = layout.stage1
    elif (path / "manifest.json").is_file():
        for sample in load_dataset(path):
            if not visible_enough(sample, min_visibility):
                continue
            result.images.append(on_white(sample))
            result.alphas.append(sample.object_mask.astype(np.float64))
    if not result.images:
        raise MetricsError(f"No generated samples found in {path}", metric="evaluate")
    return result


def _note(missing: List[str], item: str) -> None:
    logger.warning("Metric input missing: {}", item)
    missing.append(item)


@torch.no_grad()
def _consistency(generated: GeneratedSet, checkpoint: Path) -> ConsistencyResult:
    state = Stage1State.load(checkpoint)
    config = state.config
    model = state.ema.eval()
    assets = []
    for tokens, camera, scale in zip(generated.tokens, generated.cameras, generated.extents):
        extent = box_extent(scale, config.scaled_box)
        planes = model.decode_tokens(torch.as_tensor(tokens, dtype=torch.long)[None])
        assets.append((model.decoder.field(planes[0], extent), extent, camera.resized(config.render_resolution)))
    return depth_consistency(assets, config.samples_uniform, config.samples_importance)


def evaluate(
    generated: PathLike,
    validation: PathLike,
    checkpoint: Optional[PathLike] = None,
    embedding_backend: str = "random_conv",
    seed: int = 0,
    min_visibility: float = MIN_VISIBILITY,
) -> MetricsReport:
    """
    Compute every quality, semantic diversity and mesh diversity column.

    Validation samples, and generated samples given as a dataset directory,
    are kept when at least ``min_visibility`` of their silhouette is
    visible. Images on both sides are compared on white backgrounds. Inputs
    a metric needs but cannot find are listed in the report's ``missing``
    field and that metric is left empty.

    Args:
        generated: Run directory or dataset directory
        validation: Validation dataset directory
        checkpoint: Stage-1 checkpoint decoding the generated tokens; defaults to the run's own
        embedding_backend: Registered embedding backend name
        seed: Seeds surface and point-cloud subsampling
        min_visibility: Visibility filter for dataset samples on either side

    Returns:
        Metrics report

    Raises:
        MetricsError: If the generated set or the filtered validation set is empty
    """
    gen = load_generated_set(generated, min_visibility)
    dataset = load_dataset(validation)
    used = [s for s in dataset if visible_enough(s, min_visibility)]
    if not used:
        raise MetricsError("No validation samples pass the visibility filter", metric="evaluate")
    logger.info("Evaluating {} generated samples against {} of {} validation samples", len(gen.images), len(used), len(dataset))

    missing: List[str] = []
    values = {}
    backend = get_embedding_backend(embedding_backend)
    emb_g = backend.embed(np.stack(gen.images))
    emb_v = backend.embed(np.stack([on_white(s) for s in used]))
    try:
        values["fid"] = frechet_distance(emb_g, emb_v)
    except MetricsError as e:
        _note(missing, f"fid: {e.message}")
    values["mask_fou"] = mask_fou(gen.alphas)
    values["image_cov"], values["image_mmd"] = cov_mmd_embeddings(emb_g, emb_v)

    checkpoint = Path(checkpoint) if checkpoint else gen.checkpoint
    skipped = 0
    if not gen.tokens:
        _note(missing, "consistency: generated tokens")
    elif checkpoint is None or not checkpoint.is_file():
        _note(missing, "consistency: stage-1 checkpoint")
    else:
        try:
            result = _consistency(gen, checkpoint)
            values["consistency"] = result.value
            skipped = result.skipped
        except GinaError as e:
            _note(missing, f"consistency: {e.message}")

    if gen.meshes:
        values["mesh_fou"] = mesh_fou(gen.meshes)
        clouds = [pointcloud_from_sample(s, seed=seed) for s in used if s.depth_valid is not None and s.depth_valid.any()]
        if clouds:
            values["geometry_cov"], values["geometry_mmd"] = geometry_cov_mmd(clouds, gen.meshes, seed=seed)
        else:
            _note(missing, "geometry: validation depth")
    else:
        _note(missing, "meshes")

    return MetricsReport(
        **values,
        num_generated=len(gen.images),
        num_validation=len(dataset),
        num_validation_used=len(used),
        consistency_skipped=skipped,
        embedding_backend=embedding_backend,
        missing=missing,
    )
