"""Stage 1: joint training of encoder, codebook, tri-plane decoder and discriminator."""

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn

from backends.base import PerceptualBackend, get_perceptual_backend
from libs.checkpoint import (
    load_checkpoint,
    module_tensors,
    optimizer_groups,
    optimizer_tensors,
    restore_module,
    restore_optimizer,
    save_checkpoint,
)
from libs.dataset import ObjectDataset, ObjectSample
from libs.exceptions import CheckpointError, DatasetError, TrainingError
from libs.geometry import Camera, box_extent
from libs.schema import RUNTIME_FIELDS, LossReport, PipelineConfig
from metrics.image import masked_psnr, reconstruction_l2
from networks.codebook import Codebook, QuantizedLatents, straight_through, vq_loss
from networks.decoder import TriPlaneDecoder
from networks.discriminator import Discriminator
from networks.encoder import TriPlaneEncoder, premask_images
from networks.field import TriPlaneField
from networks.renderer import RenderOutput, on_white, render, render_batch
from training.losses import loss_alpha, loss_depth, loss_gan, loss_rgb, loss_semantic

CHECKPOINT_KIND = "stage1"
STAGE1_IGNORED_FIELDS = RUNTIME_FIELDS | {"maskgit"}


class GinaAutoencoder(nn.Module):
    """Encoder, codebook and decoder of one tri-plane autoencoder."""

    def __init__(self, config: PipelineConfig):
        super().__init__()
        self.config = config
        self.encoder = TriPlaneEncoder(config)
        self.codebook = Codebook(config.codebook_size, config.token_dim, config.l2_codes)
        self.decoder = TriPlaneDecoder(config)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """Tri-plane embeddings (B, N_Z, N_Z, 3, D_tok), unit-normalized with l2 codes."""
        e = self.encoder(images)
        if self.config.l2_codes:
            e = F.normalize(e, dim=-1)
        return e

    def quantize(self, embeddings: torch.Tensor) -> QuantizedLatents:
        return self.codebook.quantize(embeddings)

    def decode_tokens(self, indices: torch.Tensor) -> torch.Tensor:
        """Feature planes (B, 3, D_H, N_H, N_H) for token grids (B, N_Z, N_Z, 3)."""
        return self.decoder(self.codebook.lookup(indices))

    def fields(self, planes: torch.Tensor, extents: Sequence[np.ndarray]) -> List[TriPlaneField]:
        return [self.decoder.field(planes[b], extents[b]) for b in range(planes.shape[0])]


@dataclass
class Stage1Batch:
    """
    Tensors of one training batch.

    ``inputs`` is at image resolution; everything else is area-downsampled to
    the render resolution. Masks become fractional coverage.
    """

    sample_ids: List[str]
    inputs: torch.Tensor
    target: torch.Tensor
    mask: torch.Tensor
    skyroad: torch.Tensor
    real: torch.Tensor
    cameras: List[Camera]
    extents: List[np.ndarray]
    depth: Optional[torch.Tensor] = None
    depth_valid: Optional[torch.Tensor] = None
    semantic: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return len(self.sample_ids)


def _area(x: torch.Tensor, resolution: int) -> torch.Tensor:
    if x.shape[-1] == resolution and x.shape[-2] == resolution:
        return x
    return F.interpolate(x, size=(resolution, resolution), mode="area")


def _masked_average(values: torch.Tensor, weights: torch.Tensor, resolution: int) -> torch.Tensor:
    """Area average of values over the weighted pixels only, 0 where no weight lands."""
    num = _area(values * weights, resolution)
    den = _area(weights, resolution)
    return torch.where(den > 0, num / den.clamp_min(1e-8), torch.zeros_like(num))


def prepare_batch(samples: Sequence[ObjectSample], config: PipelineConfig) -> Stage1Batch:
    """
    Stack samples into training tensors.

    Encoder inputs are whitened outside the object mask when ``premask_input``
    is on. Targets hold only visible object pixels, so nothing outside the
    object mask reaches any loss.
    """
    dtype = torch.get_default_dtype()
    res = config.render_resolution
    images = torch.from_numpy(np.stack([s.image for s in samples])).to(dtype).permute(0, 3, 1, 2)
    masks = torch.from_numpy(np.stack([s.object_mask for s in samples])).to(dtype)[:, None]
    skyroad = torch.from_numpy(np.stack([s.skyroad_mask for s in samples])).to(dtype)[:, None]

    inputs = premask_images(images, masks) if config.premask_input else images
    mask_r = _area(masks, res)
    target = _masked_average(images, masks, res)
    real = target * mask_r + (1.0 - mask_r)

    depth = depth_valid = semantic = None
    if config.depth_loss and all(s.depth is not None for s in samples):
        raw = torch.from_numpy(np.stack([s.depth for s in samples])).to(dtype)[:, None]
        valid = (raw > 0).to(dtype)
        depth = _masked_average(raw, valid, res)[:, 0]
        depth_valid = _area(valid, res)[:, 0] > 1.0 - 1e-6
    if config.semantic_field and all(s.semantic is not None for s in samples):
        feats = torch.from_numpy(np.stack([s.semantic for s in samples])).to(dtype).permute(0, 3, 1, 2)
        semantic = _masked_average(feats, masks, res).permute(0, 2, 3, 1)

    return Stage1Batch(
        sample_ids=[s.sample_id for s in samples],
        inputs=inputs,
        target=target,
        mask=mask_r[:, 0],
        skyroad=_area(skyroad, res)[:, 0],
        real=real,
        cameras=[s.camera for s in samples],
        extents=[box_extent(s.scale, config.scaled_box) for s in samples],
        depth=depth,
        depth_valid=depth_valid,
        semantic=semantic,
    )


def composite_on_white(rgb: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """(B, R, R, 3) premultiplied colors and (B, R, R) alpha to (B, 3, R, R) images on white."""
    return on_white(rgb, alpha).permute(0, 3, 1, 2)


@dataclass
class Stage1State:
    """Everything stage-1 training mutates, plus the configuration it was built with."""

    config: PipelineConfig
    model: GinaAutoencoder
    discriminator: Discriminator
    ema: GinaAutoencoder
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0
    mean_scale: Optional[List[float]] = None
    perceptual: Optional[PerceptualBackend] = field(default=None, repr=False)

    @classmethod
    def create(cls, config: PipelineConfig) -> "Stage1State":
        """Fresh state with parameters drawn from ``config.seed``."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            model = GinaAutoencoder(config)
            discriminator = Discriminator(config.render_resolution, config.discriminator.channels)
        ema = copy.deepcopy(model).requires_grad_(False).eval()
        train = config.train
        opt_g = torch.optim.Adam(model.parameters(), lr=train.lr_generator, betas=train.betas)
        opt_d = torch.optim.Adam(discriminator.parameters(), lr=train.lr_discriminator, betas=train.betas)
        perceptual = None
        if config.loss_weights.perceptual > 0:
            perceptual = get_perceptual_backend(train.perceptual_backend)
        return cls(config, model, discriminator, ema, opt_g, opt_d, perceptual=perceptual)

    def save(self, path: Union[str, Path]) -> None:
        tensors = {}
        tensors.update(module_tensors("model", self.model))
        tensors.update(module_tensors("ema", self.ema))
        tensors.update(module_tensors("discriminator", self.discriminator))
        tensors.update(optimizer_tensors("optim_g", self.opt_g))
        tensors.update(optimizer_tensors("optim_d", self.opt_d))
        metadata = {
            "kind": CHECKPOINT_KIND,
            "step": self.step,
            "mean_scale": self.mean_scale,
            "optim_g": optimizer_groups(self.opt_g),
            "optim_d": optimizer_groups(self.opt_d),
        }
        save_checkpoint(path, tensors, self.config, metadata)
        logger.info("Saved stage-1 checkpoint at step {} to {}", self.step, path)

    @classmethod
    def load(cls, path: Union[str, Path], config: Optional[PipelineConfig] = None) -> "Stage1State":
        """
        Restore a state saved with :meth:`save`.

        Args:
            path: Checkpoint file
            config: Runtime configuration; architecture fields must match the
                stored ones. Defaults to the stored configuration.

        Raises:
            CheckpointError: If the file is not a stage-1 checkpoint or is corrupt
            ConfigurationError: If ``config`` disagrees with the stored architecture
        """
        checkpoint = load_checkpoint(path, expected_config=config, ignore=STAGE1_IGNORED_FIELDS)
        if checkpoint.metadata.get("kind") != CHECKPOINT_KIND:
            raise CheckpointError("Not a stage-1 checkpoint", path=str(path))
        if config is None:
            config = PipelineConfig.model_validate(checkpoint.config)
        state = cls.create(config)
        restore_module(state.model, checkpoint, "model")
        restore_module(state.ema, checkpoint, "ema")
        restore_module(state.discriminator, checkpoint, "discriminator")
        restore_optimizer(state.opt_g, checkpoint, "optim_g", checkpoint.metadata["optim_g"])
        restore_optimizer(state.opt_d, checkpoint, "optim_d", checkpoint.metadata["optim_d"])
        state.step = int(checkpoint.metadata["step"])
        state.mean_scale = checkpoint.metadata.get("mean_scale")
        return state


@torch.no_grad()
def ema_update(ema: nn.Module, model: nn.Module, decay: float) -> None:
    """Move the shadow parameters toward the live ones; buffers are copied."""
    for shadow, live in zip(ema.parameters(), model.parameters()):
        shadow.lerp_(live, 1.0 - decay)
    for shadow, live in zip(ema.buffers(), model.buffers()):
        shadow.copy_(live)


def train_step(batch: Stage1Batch, state: Stage1State, seed: int) -> LossReport:
    """
    One update of the discriminator and of encoder, codebook and decoder from a shared forward pass.

    The generator term is scored by the discriminator as it was before this step.

    Args:
        batch: Prepared batch
        state: Training state, updated in place
        seed: Seeds the ray jitter of this step

    Returns:
        Loss terms of the generator-side objective

    Raises:
        TrainingError: If any loss term is not finite; no parameter is updated
    """
    config = state.config
    weights = config.loss_weights
    generator = torch.Generator().manual_seed(seed)
    model = state.model.train()

    embeddings = model.encode(batch.inputs)
    usage = None
    if config.quantize:
        quantized = model.quantize(embeddings)
        latents = straight_through(embeddings, quantized.vectors)
        vq = vq_loss(embeddings, quantized.vectors, config.commitment_weight)
        usage = int(torch.unique(quantized.indices).numel())
    else:
        latents = embeddings
        vq = embeddings.new_zeros(())

    planes = model.decoder(latents)
    out = render_batch(
        model.fields(planes, batch.extents),
        batch.cameras,
        batch.extents,
        config.samples_uniform,
        config.samples_importance,
        resolution=config.render_resolution,
        generator=generator,
    )
    rgb = out.rgb.permute(0, 3, 1, 2)
    l2, perceptual = loss_rgb(rgb, batch.target, batch.mask, state.perceptual if weights.perceptual > 0 else None)
    alpha = loss_alpha(out.alpha, batch.mask, batch.skyroad)

    depth = semantic = None
    if config.depth_loss and batch.depth is not None:
        depth = loss_depth(out.depth, batch.depth, batch.depth_valid, batch.mask > 0.5)
    if config.semantic_field:
        semantic = loss_semantic(out.semantic, batch.semantic, batch.mask)

    fake = composite_on_white(out.rgb, out.alpha)
    gan_g = gan_d = r1 = fake.new_zeros(())
    train_discriminator = weights.gan > 0 and state.step >= config.train.gan_warmup_steps
    if train_discriminator:
        gan_g, gan_d, r1 = loss_gan(batch.real, fake, state.discriminator, config.r1_gamma)
    d_total = gan_d + r1

    total = weights.rgb * l2 + weights.perceptual * perceptual + weights.gan * gan_g + weights.vq * vq
    total = total + weights.alpha * alpha
    if depth is not None:
        total = total + weights.depth * depth
    if semantic is not None:
        total = total + weights.semantic * semantic

    report = LossReport(
        step=state.step,
        rgb=float(l2),
        perceptual=float(perceptual),
        gan_g=float(gan_g),
        gan_d=float(gan_d),
        r1=float(r1),
        vq=float(vq),
        alpha=float(alpha),
        depth=None if depth is None else float(depth),
        semantic=None if semantic is None else float(semantic),
        total=float(total),
        codebook_usage=usage,
    )
    if not report.is_finite() or not torch.isfinite(d_total):
        raise TrainingError("Non-finite stage-1 loss", step=state.step, report=report.model_dump())

    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    if train_discriminator:
        state.opt_d.zero_grad(set_to_none=True)
        d_total.backward()
        state.opt_d.step()
    state.opt_g.step()
    model.codebook.renormalize_()
    ema_update(state.ema, model, config.train.ema_decay)
    state.step += 1
    return report


def step_seed(seed: int, step: int) -> int:
    """Seed of one training step, derived from the run seed and the step counter."""
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def draw_batch(dataset: Sequence[ObjectSample], batch_size: int, seed: int, step: int) -> List[ObjectSample]:
    rng = np.random.default_rng([seed, step])
    indices = rng.choice(len(dataset), size=batch_size, replace=len(dataset) < batch_size)
    return [dataset[int(i)] for i in indices]


def fit_stage1(
    state: Stage1State,
    dataset: Union[ObjectDataset, Sequence[ObjectSample]],
    steps: int,
    seed: Optional[int] = None,
) -> List[LossReport]:
    """
    Run ``steps`` training steps.

    Batches and ray jitter are functions of ``(seed, state.step)``, so a run
    resumed from a checkpoint continues exactly where it stopped.

    Raises:
        DatasetError: If the dataset is empty
        TrainingError: On a non-finite loss
    """
    if len(dataset) == 0:
        raise DatasetError("Cannot train on an empty dataset")
    config = state.config
    seed = config.seed if seed is None else seed
    if state.mean_scale is None:
        state.mean_scale = np.mean([s.scale for s in dataset], axis=0).tolist()

    reports = []
    for _ in range(steps):
        step = state.step
        batch = prepare_batch(draw_batch(dataset, config.train.batch_size, seed, step), config)
        report = train_step(batch, state, step_seed(seed, step))
        reports.append(report)
        if step % config.train.log_every == 0:
            logger.bind(**report.model_dump(exclude_none=True)).info("stage1 step {}", step)
    return reports


@dataclass
class Reconstruction:
    """EMA reconstruction of one input view."""

    sample_id: str
    rgb: np.ndarray
    alpha: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    tokens: np.ndarray
    l2: float
    psnr: float


@torch.no_grad()
def encode_tokens(model: GinaAutoencoder, images: torch.Tensor, masks: torch.Tensor, premask: bool = True) -> torch.Tensor:
    """Token grids (B, N_Z, N_Z, 3) of raw images and their object masks."""
    inputs = premask_images(images, masks) if premask else images
    return model.quantize(model.encode(inputs)).indices


@torch.no_grad()
def render_tokens(
    model: GinaAutoencoder,
    tokens: torch.Tensor,
    cameras: Sequence[Camera],
    extents: Sequence[np.ndarray],
    config: PipelineConfig,
    resolution: Optional[int] = None,
) -> RenderOutput:
    """Deterministic render of token grids, one camera per asset."""
    planes = model.decode_tokens(tokens)
    return render_batch(
        model.fields(planes, extents),
        cameras,
        extents,
        config.samples_uniform,
        config.samples_importance,
        resolution=resolution or config.render_resolution,
    )


@torch.no_grad()
def reconstruct(
    state: Stage1State,
    samples: Sequence[ObjectSample],
    use_ema: bool = True,
    batch_size: Optional[int] = None,
) -> List[Reconstruction]:
    """
    Reconstruct each sample from its own view and score it on visible object pixels.

    Returns:
        One reconstruction per sample, in order
    """
    config = state.config
    model = (state.ema if use_ema else state.model).eval()
    batch_size = batch_size or config.train.batch_size
    results = []
    for start in range(0, len(samples), batch_size):
        chunk = list(samples[start:start + batch_size])
        batch = prepare_batch(chunk, config)
        embeddings = model.encode(batch.inputs)
        if config.quantize:
            quantized = model.quantize(embeddings)
            tokens, latents = quantized.indices, quantized.vectors
        else:
            tokens, latents = torch.zeros(embeddings.shape[:-1], dtype=torch.long), embeddings
        planes = model.decoder(latents)
        out = render_batch(
            model.fields(planes, batch.extents),
            batch.cameras,
            batch.extents,
            config.samples_uniform,
            config.samples_importance,
            resolution=config.render_resolution,
        )
        for b, sample in enumerate(chunk):
            rgb = out.rgb[b].double().numpy()
            target = batch.target[b].permute(1, 2, 0).double().numpy()
            mask = batch.mask[b].double().numpy()
            results.append(
                Reconstruction(
                    sample_id=sample.sample_id,
                    rgb=rgb,
                    alpha=out.alpha[b].double().numpy(),
                    target=target,
                    mask=mask,
                    tokens=tokens[b].numpy(),
                    l2=reconstruction_l2(rgb, target, mask),
                    psnr=masked_psnr(rgb, target, mask),
                )
            )
    return results


def render_view(
    model: GinaAutoencoder,
    tokens: torch.Tensor,
    camera: Camera,
    extent: np.ndarray,
    config: PipelineConfig,
    resolution: Optional[int] = None,
) -> RenderOutput:
    """Deterministic render of a single token grid (N_Z, N_Z, 3)."""
    with torch.no_grad():
        planes = model.decode_tokens(tokens[None])
        return render(
            model.decoder.field(planes[0], extent),
            camera,
            extent,
            config.samples_uniform,
            config.samples_importance,
            resolution=resolution or config.render_resolution,
        )
