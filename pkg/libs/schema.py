"""Pydantic schemas for configuration presets, metadata records and reports."""

import json
import math
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from libs.exceptions import ConfigurationError

CLASS_NAMES = ("car", "truck", "bus", "other")
TIME_NAMES = ("day", "night")
OBJECT_KINDS = ("box", "truck", "capsule", "ellipsoid")

# Object kind to class label
KIND_TO_CLASS = {"box": 0, "truck": 1, "capsule": 2, "ellipsoid": 3}


class FrozenModel(BaseModel):
    """Immutable schema base; unknown keys are rejected."""

    model_config = ConfigDict(frozen=True, extra="forbid")


class EncoderConfig(FrozenModel):
    """Image-to-tri-plane encoder widths."""

    patch_size: int = Field(16, gt=0, description="Square patch side in pixels")
    embed_dim: int = Field(128, gt=0)
    hidden_dim: int = Field(512, gt=0)
    num_heads: int = Field(8, gt=0)
    vit_blocks: int = Field(3, ge=0)
    cross_blocks: int = Field(3, gt=0)

    @model_validator(mode="after")
    def heads_divide_width(self) -> "EncoderConfig":
        if self.embed_dim % self.num_heads:
            raise ValueError("encoder.embed_dim must be divisible by encoder.num_heads")
        return self


class DecoderConfig(FrozenModel):
    """Token transformer, style generator and field MLP widths."""

    token_embed_dim: int = Field(128, gt=0)
    token_hidden_dim: int = Field(512, gt=0)
    token_heads: int = Field(8, gt=0)
    token_blocks: int = Field(3, ge=0)
    token_out_dim: int = Field(64, gt=0, description="Channels of the upsampling input")
    style_dim: int = Field(128, gt=0, description="Width of the mapping network output")
    mapping_layers: int = Field(8, gt=0)
    up_channels: Tuple[int, ...] = Field((128, 64, 32), min_length=1)
    field_hidden_dim: int = Field(64, gt=0)

    @model_validator(mode="after")
    def heads_divide_width(self) -> "DecoderConfig":
        if self.token_embed_dim % self.token_heads:
            raise ValueError("decoder.token_embed_dim must be divisible by decoder.token_heads")
        return self


class DiscriminatorConfig(FrozenModel):
    """Residual image discriminator widths, one entry per resolution level."""

    channels: Tuple[int, ...] = Field((16, 32, 64, 128), min_length=1)


class MaskGITConfig(FrozenModel):
    """Bidirectional token transformer and its optimizer."""

    num_layers: int = Field(4, gt=0)
    num_heads: int = Field(8, gt=0)
    embed_dim: int = Field(128, gt=0)
    hidden_dim: int = Field(512, gt=0)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    label_smoothing: float = Field(0.1, ge=0.0, lt=1.0)
    condition_proj_dim: int = Field(32, gt=0, description="Width of projected continuous conditions")
    learning_rate: float = Field(1e-4, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.96)
    batch_size: int = Field(16, gt=0)
    sample_temperature: float = Field(1.0, ge=0.0)
    gumbel_temperature: float = Field(1.0, ge=0.0)

    @model_validator(mode="after")
    def heads_divide_width(self) -> "MaskGITConfig":
        if self.embed_dim % self.num_heads:
            raise ValueError("maskgit.embed_dim must be divisible by maskgit.num_heads")
        if self.condition_proj_dim >= self.embed_dim:
            raise ValueError("maskgit.condition_proj_dim must be smaller than maskgit.embed_dim")
        return self


class LossWeights(FrozenModel):
    """Weights of the stage-1 objective terms."""

    rgb: float = Field(1.0, ge=0.0)
    perceptual: float = Field(1.0, ge=0.0)
    gan: float = Field(1.0, ge=0.0)
    vq: float = Field(1.0, ge=0.0)
    alpha: float = Field(1.0, ge=0.0)
    depth: float = Field(1.0, ge=0.0)
    semantic: float = Field(1.0, ge=0.0)


class TrainConfig(FrozenModel):
    """Stage-1 optimizer and schedule settings."""

    lr_generator: float = Field(1e-4, gt=0.0)
    lr_discriminator: float = Field(2e-4, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.99)
    ema_decay: float = Field(0.999, ge=0.0, le=1.0)
    gan_warmup_steps: int = Field(500, ge=0)
    batch_size: int = Field(4, gt=0)
    log_every: int = Field(10, gt=0)
    perceptual_backend: str = "patch_feature"


class PipelineConfig(FrozenModel):
    """
    Complete configuration of both stages.

    Presets are built by :func:`get_preset`; overrides go through
    :func:`load_config` so that every run is validated the same way.
    """

    image_resolution: int = Field(64, gt=0)
    render_resolution: int = Field(64, gt=0)
    latent_grid: int = Field(8, gt=0, description="N_Z, tri-plane latent cells per side")
    token_dim: int = Field(32, gt=0, description="D_tok, codebook vector width")
    codebook_size: int = Field(512, gt=1, description="K, number of codebook entries")
    plane_resolution: int = Field(64, gt=0, description="N_H, feature plane cells per side")
    plane_channels: int = Field(16, gt=0, description="D_H, feature plane channels")
    samples_uniform: int = Field(16, gt=0)
    samples_importance: int = Field(8, ge=0)
    density_threshold: float = Field(10.0, gt=0.0)
    decode_steps: int = Field(8, gt=0)
    commitment_weight: float = Field(0.25, ge=0.0)
    r1_gamma: float = Field(1.0, ge=0.0)
    scaled_box: bool = True
    depth_loss: bool = False
    semantic_field: bool = False
    semantic_dim: int = Field(8, gt=0)
    l2_codes: bool = True
    quantize: bool = True
    premask_input: bool = True
    mesh_resolution: int = Field(64, ge=8)
    seed: int = 0
    encoder: EncoderConfig = EncoderConfig()
    decoder: DecoderConfig = DecoderConfig()
    discriminator: DiscriminatorConfig = DiscriminatorConfig()
    maskgit: MaskGITConfig = MaskGITConfig()
    loss_weights: LossWeights = LossWeights()
    train: TrainConfig = TrainConfig()

    @model_validator(mode="after")
    def check_consistency(self) -> "PipelineConfig":
        """Validate cross-field constraints."""
        if self.render_resolution > self.image_resolution:
            raise ValueError("render_resolution must not exceed image_resolution")
        if self.image_resolution % self.encoder.patch_size:
            raise ValueError("image_resolution must be divisible by encoder.patch_size")
        ratio = self.plane_resolution // self.latent_grid
        if self.plane_resolution % self.latent_grid or ratio & (ratio - 1):
            raise ValueError("plane_resolution must be a power-of-two multiple of latent_grid")
        return self

    @property
    def total_samples(self) -> int:
        return self.samples_uniform + self.samples_importance

    @property
    def sequence_length(self) -> int:
        return 3 * self.latent_grid * self.latent_grid


def _paper_preset() -> PipelineConfig:
    return PipelineConfig(
        image_resolution=256,
        render_resolution=128,
        latent_grid=16,
        token_dim=32,
        codebook_size=2048,
        plane_resolution=256,
        plane_channels=32,
        samples_uniform=24,
        samples_importance=16,
        density_threshold=10.0,
        decode_steps=10,
        r1_gamma=1.0,
        mesh_resolution=128,
        encoder=EncoderConfig(embed_dim=512, hidden_dim=2048, num_heads=8),
        decoder=DecoderConfig(
            token_embed_dim=512,
            token_hidden_dim=2048,
            token_out_dim=256,
            style_dim=512,
            up_channels=(512, 256, 128),
        ),
        discriminator=DiscriminatorConfig(channels=(16, 32, 64, 128, 256)),
        maskgit=MaskGITConfig(num_layers=12, num_heads=8, embed_dim=768, hidden_dim=3072, batch_size=64),
        train=TrainConfig(batch_size=32),
    )


PRESETS = {
    "desk": PipelineConfig,
    "paper": _paper_preset,
}


def get_preset(name: str) -> PipelineConfig:
    """
    Build a named configuration preset.

    Args:
        name: Preset name, "desk" or "paper"

    Returns:
        Fresh immutable configuration

    Raises:
        ConfigurationError: If the preset is unknown
    """
    factory = PRESETS.get(name)
    if factory is None:
        raise ConfigurationError(f"Unknown preset '{name}'", config_key="preset")
    return factory()


def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(
    preset: str = "desk",
    overrides: Optional[Dict[str, Any]] = None,
    config_file: Optional[Path] = None,
    seed: Optional[int] = None,
) -> PipelineConfig:
    """
    Resolve a preset plus JSON overrides into a validated configuration.

    Args:
        preset: Base preset name
        overrides: Nested dictionary of field overrides
        config_file: Optional JSON file with further overrides
        seed: Optional seed override, applied last

    Returns:
        Validated configuration

    Raises:
        ConfigurationError: If the overrides are unreadable or invalid
    """
    data = get_preset(preset).model_dump()
    if config_file is not None:
        try:
            file_overrides = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read config file: {e}", config_key=str(config_file))
        if not isinstance(file_overrides, dict):
            raise ConfigurationError("Config file must contain a JSON object", config_key=str(config_file))
        data = _deep_merge(data, file_overrides)
    if overrides:
        data = _deep_merge(data, overrides)
    if seed is not None:
        data["seed"] = seed

    try:
        return PipelineConfig.model_validate(data)
    except PydanticValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"]) or None
        raise ConfigurationError(f"Invalid configuration: {first['msg']}", config_key=key)


RUNTIME_FIELDS = frozenset({"seed", "train", "loss_weights", "mesh_resolution", "decode_steps"})


def config_difference(
    expected: PipelineConfig,
    found: Dict[str, Any],
    ignore: frozenset = RUNTIME_FIELDS,
) -> Optional[str]:
    """
    Find the first architecture field that differs between two configurations.

    Args:
        expected: Configuration the caller is running with
        found: Configuration dictionary stored alongside saved weights
        ignore: Top-level fields that do not affect tensor shapes

    Returns:
        Dotted field name, or None when compatible
    """
    reference = expected.model_dump()

    def walk(a: Any, b: Any, prefix: str) -> Optional[str]:
        if isinstance(a, dict):
            if not isinstance(b, dict):
                return prefix
            for key in a:
                if not prefix and key in ignore:
                    continue
                found_key = walk(a[key], b.get(key), f"{prefix}.{key}" if prefix else key)
                if found_key:
                    return found_key
            return None
        if isinstance(a, (list, tuple)):
            return None if list(a) == list(b or []) else prefix
        return None if a == b else prefix

    return walk(reference, found, "")


class ConditionSpec(FrozenModel):
    """Condition for stage-2 synthesis; exactly one payload matches the kind."""

    kind: Literal["none", "discrete", "continuous", "image"] = "none"
    discrete_value: Optional[int] = Field(None, ge=0, description="Class index")
    continuous_vector: Optional[Tuple[float, ...]] = None
    source_image: Optional[str] = Field(None, description="Path of a dataset sample directory")
    mask_ratio: Optional[float] = Field(None, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def payload_matches_kind(self) -> "ConditionSpec":
        populated = {
            "discrete": self.discrete_value is not None,
            "continuous": self.continuous_vector is not None,
            "image": self.source_image is not None,
        }
        for kind, present in populated.items():
            if present != (kind == self.kind):
                raise ValueError(f"condition of kind '{self.kind}' must carry exactly its own payload")
        if self.mask_ratio is not None and self.kind != "image":
            raise ValueError("mask_ratio applies to image conditions only")
        if self.kind == "image" and self.mask_ratio is None:
            raise ValueError("image conditions require mask_ratio")
        if self.continuous_vector is not None:
            if not self.continuous_vector or not all(math.isfinite(v) for v in self.continuous_vector):
                raise ValueError("continuous_vector must be non-empty and finite")
        return self


class OccluderSpec(FrozenModel):
    """Occluding primitive placed between the camera and the object."""

    shape: Literal["sphere", "disk"]
    center: Tuple[float, float, float]
    radius: float = Field(..., gt=0.0)
    normal: Optional[Tuple[float, float, float]] = None


class SceneSpec(FrozenModel):
    """Procedural scene description for the synthetic renderer."""

    object_kind: Literal["box", "truck", "capsule", "ellipsoid"]
    base_color: Tuple[float, float, float]
    pattern_frequency: float = Field(3.0, ge=0.0)
    pattern_strength: float = Field(0.25, ge=0.0, le=1.0)
    scale: Tuple[float, float, float]
    occluders: Tuple[OccluderSpec, ...] = ()
    azimuth_range: Tuple[float, float] = (0.0, 360.0)
    elevation_range: Tuple[float, float] = (5.0, 30.0)
    radius_range: Tuple[float, float] = Field((3.0, 4.0), description="Orbit radius in multiples of the circumradius")
    brightness: float = Field(1.0, ge=0.3, le=1.0)
    class_label: int = Field(..., ge=0, lt=len(CLASS_NAMES))

    @field_validator("scale")
    @classmethod
    def scale_in_range(cls, v):
        if not all(0.5 <= s <= 6.0 for s in v):
            raise ValueError("scale components must lie in [0.5, 6.0]")
        return v

    @field_validator("base_color")
    @classmethod
    def color_in_range(cls, v):
        if not all(0.0 <= c <= 1.0 for c in v):
            raise ValueError("base_color components must lie in [0, 1]")
        return v

    @property
    def time_of_day(self) -> int:
        """0 for day, 1 for night."""
        return 0 if self.brightness >= 0.6 else 1


class CameraRecord(FrozenModel):
    """Serialized pinhole camera, rotation maps camera axes to the object frame."""

    focal: Tuple[float, float]
    principal: Tuple[float, float]
    rotation: Tuple[Tuple[float, float, float], Tuple[float, float, float], Tuple[float, float, float]]
    translation: Tuple[float, float, float]
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)


class SampleMeta(FrozenModel):
    """Per-sample metadata stored as meta.json."""

    sample_id: str
    camera: CameraRecord
    scale: Tuple[float, float, float]
    class_label: int = Field(0, ge=0)
    time_of_day: int = Field(0, ge=0)
    object_kind: Optional[str] = None
    brightness: Optional[float] = None
    occluders: Tuple[OccluderSpec, ...] = ()
    visibility: Optional[float] = Field(None, ge=0.0, le=1.0)
    has_depth: bool = False
    has_semantic: bool = False


class Manifest(FrozenModel):
    """Dataset manifest listing sample ids in order."""

    version: int = 1
    samples: List[str] = Field(default_factory=list)
    image_resolution: Optional[int] = None
    semantic_dim: Optional[int] = None
    class_names: Tuple[str, ...] = CLASS_NAMES
    time_names: Tuple[str, ...] = TIME_NAMES


class LossReport(FrozenModel):
    """Stage-1 loss terms of one optimizer step."""

    step: int = 0
    rgb: float
    perceptual: float
    gan_g: float
    gan_d: float
    r1: float = 0.0
    vq: float
    alpha: float
    depth: Optional[float] = None
    semantic: Optional[float] = None
    total: float
    codebook_usage: Optional[int] = None

    def is_finite(self) -> bool:
        values = [self.rgb, self.perceptual, self.gan_g, self.gan_d, self.r1, self.vq, self.alpha, self.total]
        values += [v for v in (self.depth, self.semantic) if v is not None]
        return all(math.isfinite(v) for v in values)


METRICS_SCHEMA_VERSION = 1

METRIC_COLUMNS = (
    "fid",
    "mask_fou",
    "image_cov",
    "image_mmd",
    "consistency",
    "mesh_fou",
    "geometry_cov",
    "geometry_mmd",
)


class MetricsReport(FrozenModel):
    """Evaluation report covering image quality, semantic diversity and mesh diversity."""

    schema_version: Literal[1] = METRICS_SCHEMA_VERSION
    fid: Optional[float] = None
    mask_fou: Optional[float] = None
    image_cov: Optional[float] = None
    image_mmd: Optional[float] = None
    consistency: Optional[float] = None
    mesh_fou: Optional[float] = None
    geometry_cov: Optional[float] = None
    geometry_mmd: Optional[float] = None
    num_generated: int = 0
    num_validation: int = 0
    num_validation_used: int = 0
    consistency_skipped: int = 0
    embedding_backend: str = "random_conv"
    missing: List[str] = Field(default_factory=list)

    def to_table(self) -> str:
        """Render the metric columns as a fixed-width text table."""
        header = " | ".join(f"{name:>12}" for name in METRIC_COLUMNS)
        cells = []
        for name in METRIC_COLUMNS:
            value = getattr(self, name)
            cells.append(f"{'n/a':>12}" if value is None else f"{value:>12.4f}")
        return f"{header}\n{'-' * len(header)}\n{' | '.join(cells)}"


class RunRecord(FrozenModel):
    """Contents of run.json written by every CLI command; dataset records carry no timestamp."""

    command: str
    argv: List[str]
    seed: int
    preset: str
    config: Dict[str, Any]
    created_at: Optional[datetime] = Field(default_factory=datetime.now)
