"""Procedural scenes, oracle rendering of samples and deterministic dataset generation."""

import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from libs.dataset import ObjectSample, save_dataset
from libs.exceptions import DatasetError, ValidationError
from libs.geometry import Camera, circumradius
from libs.logs import get_num_workers
from libs.schema import CLASS_NAMES, OBJECT_KINDS, OccluderSpec, PipelineConfig, SceneSpec
from synthetic.raycast import GROUND, OBJECT, SKY, cast_scene, part_features, shade

# Scale ranges (min, max) per object kind, meters along x, y, z
SCALE_RANGES = {
    "box": ((3.5, 5.0), (1.6, 2.0), (1.3, 1.7)),
    "truck": ((5.0, 6.0), (2.0, 2.5), (2.2, 3.0)),
    "capsule": ((4.0, 6.0), (1.8, 2.5), (1.8, 2.6)),
    "ellipsoid": ((0.6, 2.0), (0.6, 2.0), (0.6, 2.0)),
}
DEFAULT_OCCLUSION_PROB = 0.5
DEFAULT_MIN_VISIBILITY = 0.1
MAX_OCCLUDER_ATTEMPTS = 20


def allocate_classes(n: int, mixture: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    """
    Class labels whose histogram is the largest-remainder rounding of n * mixture, shuffled.

    Raises:
        ValidationError: If the mixture is not a distribution over the classes
    """
    weights = np.asarray(mixture, dtype=np.float64)
    if weights.shape != (len(CLASS_NAMES),) or np.any(weights < 0) or weights.sum() <= 0:
        raise ValidationError("Class mixture must hold one nonnegative weight per class", field="mixture")
    expected = n * weights / weights.sum()
    counts = np.floor(expected).astype(int)
    remainder = n - counts.sum()
    order = np.argsort(-(expected - counts), kind="stable")
    counts[order[:remainder]] += 1
    labels = np.repeat(np.arange(len(weights)), counts)
    rng.shuffle(labels)
    return labels


def sample_scene_spec(class_label: int, rng: np.random.Generator) -> SceneSpec:
    """Draw an unoccluded scene of the object kind behind ``class_label``."""
    kind = OBJECT_KINDS[class_label]
    scale = tuple(float(rng.uniform(lo, hi)) for lo, hi in SCALE_RANGES[kind])
    return SceneSpec(
        object_kind=kind,
        base_color=tuple(float(c) for c in rng.uniform(0.15, 0.9, size=3)),
        pattern_frequency=float(rng.uniform(2.0, 5.0)),
        pattern_strength=float(rng.uniform(0.1, 0.35)),
        scale=scale,
        brightness=float(rng.uniform(0.3, 1.0)),
        class_label=class_label,
    )


def sample_view(spec: SceneSpec, rng: np.random.Generator, resolution: int) -> Camera:
    """Orbit camera drawn from the scene's azimuth, elevation and radius ranges."""
    azimuth = rng.uniform(*spec.azimuth_range)
    elevation = rng.uniform(*spec.elevation_range)
    radius = rng.uniform(*spec.radius_range) * circumradius(spec.scale)
    return Camera.orbit(azimuth, elevation, radius, resolution=resolution)


def place_occluders(spec: SceneSpec, camera: Camera, rng: np.random.Generator, shrink: float = 1.0) -> Tuple[OccluderSpec, ...]:
    """One or two occluders on segments from the camera toward points of the object."""
    eye = camera.translation
    distance = float(np.linalg.norm(eye))
    object_radius = circumradius(spec.scale)
    occluders = []
    for _ in range(int(rng.integers(1, 3))):
        aim = rng.uniform(-0.25, 0.25, size=3) * np.asarray(spec.scale)
        direction = aim - eye
        direction /= np.linalg.norm(direction)
        travel = rng.uniform(0.35, 0.7) * (distance - object_radius)
        center = eye + travel * direction
        radius = shrink * rng.uniform(0.15, 0.45) * object_radius * travel / distance
        if rng.uniform() < 0.5:
            occluders.append(OccluderSpec(shape="sphere", center=tuple(center), radius=radius))
        else:
            occluders.append(OccluderSpec(shape="disk", center=tuple(center), radius=radius, normal=tuple(-direction)))
    return tuple(occluders)


def _phase(seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 2.0 * math.pi, size=3)


def render_masks(spec: SceneSpec, camera: Camera, with_occluders: bool = True) -> np.ndarray:
    """Object silhouette (H, W) of the scene as seen by ``camera``."""
    origins, directions = camera.rays()
    hits = cast_scene(spec, origins, directions, with_occluders)
    return (hits.category == OBJECT).reshape(camera.height, camera.width)


def render_sample(
    spec: SceneSpec,
    camera: Camera,
    seed: int,
    sample_id: str = "000000",
    semantic_dim: Optional[int] = None,
    visibility: Optional[float] = None,
) -> ObjectSample:
    """
    Rasterize a scene by analytic ray casting.

    Args:
        spec: Scene description
        camera: View in the object frame
        seed: Seeds the albedo pattern phase
        sample_id: Identifier stored with the sample
        semantic_dim: Width of per-part semantic features; None skips them
        visibility: Visible fraction of the unoccluded silhouette, if known

    Returns:
        Validated sample; depth is the first-hit distance on object pixels and 0 elsewhere

    Raises:
        ValidationError: If the camera is degenerate
    """
    camera.validate()
    origins, directions = camera.rays()
    hits = cast_scene(spec, origins, directions)
    shape = (camera.height, camera.width)

    obj = hits.category == OBJECT
    image = shade(spec, hits, _phase(seed)).reshape(*shape, 3).astype(np.float32)
    skyroad = ((hits.category == SKY) | (hits.category == GROUND)).reshape(shape)
    depth = np.where(obj, hits.t, 0.0).reshape(shape).astype(np.float32)

    semantic = None
    if semantic_dim:
        table = part_features(semantic_dim)
        semantic = np.zeros((len(hits.t), semantic_dim), dtype=np.float32)
        semantic[obj] = table[hits.part[obj]]
        semantic = semantic.reshape(*shape, semantic_dim)

    sample = ObjectSample(
        sample_id=sample_id,
        image=image,
        object_mask=obj.reshape(shape),
        skyroad_mask=skyroad,
        camera=camera,
        scale=np.asarray(spec.scale, dtype=np.float64),
        depth=depth,
        semantic=semantic,
        class_label=spec.class_label,
        time_of_day=spec.time_of_day,
        object_kind=spec.object_kind,
        brightness=spec.brightness,
        occluders=spec.occluders,
        visibility=visibility,
    )
    sample.validate()
    return sample


def _generate_one(
    index: int,
    class_label: int,
    seed: int,
    resolution: int,
    semantic_dim: int,
    occlusion_prob: float,
    min_visibility: float,
) -> ObjectSample:
    rng = np.random.default_rng([seed, index])
    spec = sample_scene_spec(class_label, rng)
    camera = sample_view(spec, rng, resolution)
    full = render_masks(spec, camera, with_occluders=False)
    visibility = 1.0

    if rng.uniform() < occlusion_prob:
        for attempt in range(MAX_OCCLUDER_ATTEMPTS):
            candidate = spec.model_copy(update={"occluders": place_occluders(spec, camera, rng, 0.85 ** attempt)})
            visible = render_masks(candidate, camera)
            fraction = visible.sum() / max(full.sum(), 1)
            if visible.sum() < full.sum() and fraction >= min_visibility:
                spec, visibility = candidate, float(fraction)
                break
        else:
            raise DatasetError(f"No valid occluder layout after {MAX_OCCLUDER_ATTEMPTS} attempts", sample_id=f"{index:06d}")

    return render_sample(spec, camera, int(rng.integers(2**31)), f"{index:06d}", semantic_dim, visibility)


def generate_samples(
    n: int,
    config: PipelineConfig,
    seed: int,
    occlusion_prob: float = DEFAULT_OCCLUSION_PROB,
    min_visibility: float = DEFAULT_MIN_VISIBILITY,
    mixture: Optional[Sequence[float]] = None,
) -> List[ObjectSample]:
    """
    Draw and render ``n`` samples; rendering runs on a thread pool, results keep index order.

    Raises:
        ValidationError: If n < 1 or a probability is out of range
    """
    if n < 1:
        raise ValidationError("Dataset size must be at least 1", field="n", value=n)
    if not 0.0 <= occlusion_prob <= 1.0:
        raise ValidationError("Occlusion probability must lie in [0, 1]", field="occlusion_prob", value=occlusion_prob)
    if not 0.0 <= min_visibility < 1.0:
        raise ValidationError("Minimum visibility must lie in [0, 1)", field="min_visibility", value=min_visibility)

    mixture = mixture if mixture is not None else [1.0 / len(CLASS_NAMES)] * len(CLASS_NAMES)
    labels = allocate_classes(n, mixture, np.random.default_rng(seed))

    def task(index: int) -> ObjectSample:
        return _generate_one(
            index, int(labels[index]), seed, config.image_resolution, config.semantic_dim, occlusion_prob, min_visibility
        )

    with ThreadPoolExecutor(max_workers=get_num_workers()) as pool:
        return list(pool.map(task, range(n)))


def generate_dataset(
    n: int,
    config: PipelineConfig,
    seed: int,
    out_dir: Union[str, Path],
    occlusion_prob: float = DEFAULT_OCCLUSION_PROB,
    min_visibility: float = DEFAULT_MIN_VISIBILITY,
    mixture: Optional[Sequence[float]] = None,
) -> Path:
    """
    Generate a synthetic dataset directory.

    Args:
        n: Number of samples, at least 1
        config: Supplies image resolution and semantic width
        seed: Every scene parameter is drawn from this seed
        out_dir: Destination directory
        occlusion_prob: Probability that a sample gets occluders
        min_visibility: Smallest visible fraction of the silhouette an occluded sample may keep
        mixture: Class proportions, uniform by default

    Returns:
        Dataset directory
    """
    samples = generate_samples(n, config, seed, occlusion_prob, min_visibility, mixture)
    path = save_dataset(samples, out_dir, semantic_dim=config.semantic_dim)
    logger.info("Generated {} samples in {}", n, path)
    return path
