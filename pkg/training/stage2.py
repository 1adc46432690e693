"""Stage 2: masked-token prior over tri-plane token sequences, its training and iterative sampling."""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from loguru import logger

from libs.checkpoint import (
    load_checkpoint,
    module_tensors,
    optimizer_groups,
    optimizer_tensors,
    restore_module,
    restore_optimizer,
    save_checkpoint,
)
from libs.dataset import ObjectSample, load_sample
from libs.exceptions import CheckpointError, ConfigurationError, SamplingError, TrainingError, ValidationError
from libs.geometry import sincos_encoding
from libs.schema import CLASS_NAMES, RUNTIME_FIELDS, TIME_NAMES, ConditionSpec, PipelineConfig
from networks.maskgit import MaskTransformer
from training.stage1 import Stage1State, encode_tokens, step_seed

CHECKPOINT_KIND = "stage2"
SCALE_ENCODING_DEGREES = 6

PathLike = Union[str, Path]


def flatten(indices: torch.Tensor) -> torch.Tensor:
    """(..., N_Z, N_Z, 3) token grids to (..., 3 N_Z^2) sequences, row-major per plane, planes xy, xz, yz."""
    return rearrange(indices, "... i j p -> ... (p i j)")


def unflatten(sequence: torch.Tensor, latent_grid: int, codebook_size: int) -> torch.Tensor:
    """
    Inverse of :func:`flatten`.

    Raises:
        ValidationError: If the sequence still holds MASK or any id outside the codebook
    """
    if sequence.shape[-1] != 3 * latent_grid * latent_grid:
        raise ValidationError(
            f"Sequence length {sequence.shape[-1]} does not match a {latent_grid}x{latent_grid} tri-plane",
            field="tokens",
        )
    if sequence.numel() and (sequence.min() < 0 or sequence.max() >= codebook_size):
        raise ValidationError("Sequence contains MASK or out-of-vocabulary tokens", field="tokens")
    return rearrange(sequence, "... (p i j) -> ... i j p", p=3, i=latent_grid, j=latent_grid)


def _masked_count(ratio: float, length: int) -> int:
    return min(length, max(1, math.ceil(ratio * length - 1e-9)))


def mask_tokens(
    sequence: torch.Tensor,
    ratio: float,
    seed: int,
    mask_id: int,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Replace ceil(ratio * L) uniformly chosen positions of every row with MASK.

    Args:
        sequence: (L,) or (B, L) token ids
        ratio: Fraction to mask, in (0, 1]
        seed: Seeds the position draw
        mask_id: MASK token id

    Returns:
        Masked sequence and a bool tensor marking the masked positions

    Raises:
        ValidationError: If ratio is outside (0, 1]
    """
    if not 0.0 < ratio <= 1.0:
        raise ValidationError("Mask ratio must lie in (0, 1]", field="mask_ratio", value=ratio)
    generator = torch.Generator().manual_seed(seed)
    rows = sequence.reshape(-1, sequence.shape[-1])
    length = rows.shape[1]
    count = _masked_count(ratio, length)
    positions = torch.zeros_like(rows, dtype=torch.bool)
    for r in range(rows.shape[0]):
        positions[r, torch.randperm(length, generator=generator)[:count]] = True
    masked = torch.where(positions, torch.full_like(rows, mask_id), rows)
    return masked.reshape(sequence.shape), positions.reshape(sequence.shape)


def mask_schedule(length: int, steps: int) -> List[int]:
    """
    Tokens still masked after each decoding step under the cosine schedule.

    Returns:
        T + 1 counts, starting at ``length`` and ending at 0, strictly
        decreasing while positive
    """
    if steps < 1:
        raise ValidationError("Decoding needs at least one step", field="steps", value=steps)
    counts = [length]
    for t in range(1, steps + 1):
        remaining = int(math.floor(length * math.cos(math.pi * t / (2 * steps))))
        counts.append(max(0, min(remaining, counts[-1] - 1)))
    counts[-1] = 0
    return counts


def masked_nll(
    logits: torch.Tensor,
    targets: torch.Tensor,
    mask: torch.Tensor,
    label_smoothing: float = 0.0,
) -> torch.Tensor:
    """Cross-entropy over masked positions only."""
    return F.cross_entropy(logits[mask], targets[mask], label_smoothing=label_smoothing)


def condition_layout(condition_kind: str, config: PipelineConfig) -> Tuple[str, int, int]:
    """
    Network conditioning for a training condition kind.

    Returns:
        (mode, number of discrete classes, continuous width)

    Raises:
        ConfigurationError: If the kind is unknown
    """
    layouts = {
        "none": ("none", 0, 0),
        "class": ("discrete", len(CLASS_NAMES), 0),
        "time": ("discrete", len(TIME_NAMES), 0),
        "scale": ("continuous", 0, 3 * SCALE_ENCODING_DEGREES * 2),
        "semantic": ("continuous", 0, config.semantic_dim),
    }
    if condition_kind not in layouts:
        raise ConfigurationError(
            f"Unknown condition '{condition_kind}', expected one of {sorted(layouts)}",
            config_key="condition",
        )
    return layouts[condition_kind]


@dataclass
class ConditionPayload:
    """Model-ready condition: a class index (discrete) or a vector (continuous), or nothing."""

    mode: str
    value: Optional[torch.Tensor] = None

    def batch(self, n: int) -> Optional[torch.Tensor]:
        if self.value is None:
            return None
        if self.mode == "discrete":
            return self.value.reshape(1).expand(n)
        return self.value.reshape(1, -1).expand(n, -1)


def condition_from_sample(sample: ObjectSample, condition_kind: str) -> ConditionSpec:
    """
    Condition of the given kind carried by a dataset sample.

    Raises:
        ValidationError: If the sample lacks the data the kind needs
    """
    if condition_kind == "none":
        return ConditionSpec()
    if condition_kind == "class":
        return ConditionSpec(kind="discrete", discrete_value=sample.class_label)
    if condition_kind == "time":
        return ConditionSpec(kind="discrete", discrete_value=sample.time_of_day)
    if condition_kind == "scale":
        return ConditionSpec(kind="continuous", continuous_vector=tuple(float(s) for s in sample.scale))
    if condition_kind == "semantic":
        if sample.semantic is None or not sample.object_mask.any():
            raise ValidationError(f"Sample {sample.sample_id} has no semantic features", field="semantic")
        mean = sample.semantic[sample.object_mask].mean(axis=0)
        return ConditionSpec(kind="continuous", continuous_vector=tuple(float(v) for v in mean))
    raise ConfigurationError(f"Unknown condition '{condition_kind}'", config_key="condition")


def encode_condition(spec: ConditionSpec, condition_kind: str, config: PipelineConfig) -> ConditionPayload:
    """
    Turn a condition spec into model input for a prior trained on ``condition_kind``.

    Scale vectors (3 values) are sine/cosine encoded; image conditions take the
    condition of the referenced sample.

    Raises:
        ValidationError: If the payload does not fit the model's conditioning
    """
    mode, num_classes, width = condition_layout(condition_kind, config)
    if spec.kind == "image":
        return encode_condition(condition_from_sample(load_sample(spec.source_image), condition_kind), condition_kind, config)
    if mode == "none":
        if spec.kind != "none":
            raise ValidationError(f"Prior is unconditional, got a {spec.kind} condition", field="condition")
        return ConditionPayload(mode)
    if spec.kind == "none":
        raise ValidationError(f"Prior trained on '{condition_kind}' needs a condition", field="condition")

    if mode == "discrete":
        if spec.kind != "discrete":
            raise ValidationError(f"'{condition_kind}' expects a discrete condition", field="condition")
        if spec.discrete_value >= num_classes:
            raise ValidationError(
                f"Class {spec.discrete_value} outside the {num_classes} configured classes",
                field="discrete_value",
                value=spec.discrete_value,
            )
        return ConditionPayload(mode, torch.tensor(spec.discrete_value, dtype=torch.long))

    if spec.kind != "continuous":
        raise ValidationError(f"'{condition_kind}' expects a continuous condition", field="condition")
    vector = np.asarray(spec.continuous_vector, dtype=np.float64)
    if condition_kind == "scale" and vector.shape == (3,):
        vector = sincos_encoding(vector, SCALE_ENCODING_DEGREES)
    if vector.shape != (width,):
        raise ValidationError(
            f"Condition vector has {vector.size} values, expected {width}",
            field="continuous_vector",
            value=vector.size,
        )
    return ConditionPayload(mode, torch.from_numpy(vector).to(torch.get_default_dtype()))


@dataclass
class Stage2State:
    """Prior, optimizer and the stage-1 vocabulary it was trained against."""

    config: PipelineConfig
    condition_kind: str
    model: MaskTransformer
    optimizer: torch.optim.Optimizer
    step: int = 0

    @classmethod
    def create(cls, config: PipelineConfig, condition_kind: str = "none") -> "Stage2State":
        mode, num_classes, width = condition_layout(condition_kind, config)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            model = MaskTransformer(config, mode, num_classes, width)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.maskgit.learning_rate, betas=config.maskgit.betas)
        return cls(config, condition_kind, model, optimizer)

    def save(self, path: PathLike) -> None:
        tensors = {}
        tensors.update(module_tensors("maskgit", self.model))
        tensors.update(optimizer_tensors("optim", self.optimizer))
        metadata = {
            "kind": CHECKPOINT_KIND,
            "condition_kind": self.condition_kind,
            "step": self.step,
            "optim": optimizer_groups(self.optimizer),
        }
        save_checkpoint(path, tensors, self.config, metadata)
        logger.info("Saved stage-2 checkpoint at step {} to {}", self.step, path)

    @classmethod
    def load(cls, path: PathLike, config: Optional[PipelineConfig] = None) -> "Stage2State":
        """
        Restore a prior saved with :meth:`save`.

        Raises:
            CheckpointError: If the file is not a stage-2 checkpoint
            ConfigurationError: If ``config`` disagrees with the stored architecture
        """
        checkpoint = load_checkpoint(path, expected_config=config, ignore=RUNTIME_FIELDS)
        if checkpoint.metadata.get("kind") != CHECKPOINT_KIND:
            raise CheckpointError("Not a stage-2 checkpoint", path=str(path))
        if config is None:
            config = PipelineConfig.model_validate(checkpoint.config)
        state = cls.create(config, checkpoint.metadata["condition_kind"])
        restore_module(state.model, checkpoint, "maskgit")
        restore_optimizer(state.optimizer, checkpoint, "optim", checkpoint.metadata["optim"])
        state.step = int(checkpoint.metadata["step"])
        return state


def check_vocabulary(stage1: Stage1State, stage2: Stage2State) -> None:
    """
    Raises:
        ConfigurationError: If the prior's vocabulary differs from the stage-1 codebook
    """
    if stage2.model.codebook_size != stage1.model.codebook.codebook_size:
        raise ConfigurationError(
            f"Prior vocabulary {stage2.model.codebook_size} does not match codebook size "
            f"{stage1.model.codebook.codebook_size}",
            config_key="codebook_size",
        )
    if stage2.config.latent_grid != stage1.config.latent_grid:
        raise ConfigurationError("Prior and stage-1 latent grids differ", config_key="latent_grid")


@torch.no_grad()
def extract_tokens(stage1: Stage1State, samples: Sequence[ObjectSample], batch_size: int = 16) -> torch.Tensor:
    """Flattened token sequences (N, 3 N_Z^2) of samples, encoded with the EMA weights."""
    model = stage1.ema.eval()
    dtype = torch.get_default_dtype()
    chunks = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = torch.from_numpy(np.stack([s.image for s in chunk])).to(dtype).permute(0, 3, 1, 2)
        masks = torch.from_numpy(np.stack([s.object_mask for s in chunk])).to(dtype)
        chunks.append(flatten(encode_tokens(model, images, masks, stage1.config.premask_input)))
    return torch.cat(chunks, dim=0)


def dataset_conditions(
    samples: Sequence[ObjectSample],
    condition_kind: str,
    config: PipelineConfig,
) -> Optional[torch.Tensor]:
    """Stacked model conditions of every sample, None for unconditional priors."""
    payloads = [encode_condition(condition_from_sample(s, condition_kind), condition_kind, config) for s in samples]
    if not payloads or payloads[0].value is None:
        return None
    return torch.stack([p.value for p in payloads])


def train_step_stage2(
    tokens: torch.Tensor,
    condition: Optional[torch.Tensor],
    state: Stage2State,
    seed: int,
) -> float:
    """
    One masked-prediction step on a batch of complete sequences.

    Each row is masked at its own ratio cos(pi r / 2) with r uniform in [0, 1).

    Returns:
        Masked negative log-likelihood of the batch

    Raises:
        ConfigurationError: If a token lies outside the prior's vocabulary
        TrainingError: If the loss is not finite
    """
    model = state.model
    if tokens.numel() and (tokens.min() < 0 or tokens.max() >= model.codebook_size):
        raise ConfigurationError(
            f"Token ids outside the codebook of size {model.codebook_size}",
            config_key="codebook_size",
        )
    generator = torch.Generator().manual_seed(seed)
    batch, length = tokens.shape
    ratio = torch.cos(0.5 * math.pi * torch.rand(batch, generator=generator, dtype=torch.float64))
    counts = torch.ceil(ratio * length - 1e-9).clamp(1, length).long()
    scores = torch.rand(batch, length, generator=generator)
    ranks = scores.argsort(dim=1).argsort(dim=1)
    mask = ranks < counts[:, None]
    inputs = torch.where(mask, torch.full_like(tokens, model.mask_id), tokens)

    model.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        logits = model(inputs, condition)
    loss = masked_nll(logits, tokens, mask, state.config.maskgit.label_smoothing)
    if not torch.isfinite(loss):
        raise TrainingError("Non-finite stage-2 loss", step=state.step, report={"nll": float(loss)})

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return float(loss)


def fit_stage2(
    state: Stage2State,
    tokens: torch.Tensor,
    conditions: Optional[torch.Tensor],
    steps: int,
    seed: Optional[int] = None,
) -> List[float]:
    """Train for ``steps`` steps on batches drawn from ``(seed, state.step)``."""
    if tokens.shape[0] == 0:
        raise ValidationError("No token sequences to train on", field="tokens")
    mg = state.config.maskgit
    seed = state.config.seed if seed is None else seed
    losses = []
    for _ in range(steps):
        step = state.step
        rng = np.random.default_rng([seed, step])
        index = torch.from_numpy(rng.choice(tokens.shape[0], size=mg.batch_size, replace=tokens.shape[0] < mg.batch_size))
        condition = conditions[index] if conditions is not None else None
        losses.append(train_step_stage2(tokens[index], condition, state, step_seed(seed, step)))
        if step % state.config.train.log_every == 0:
            logger.bind(step=step, nll=losses[-1]).info("stage2 step {}", step)
    return losses


def _gumbel(shape: Tuple[int, ...], generator: torch.Generator) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=torch.float64).clamp(1e-20, 1.0 - 1e-7)
    return -torch.log(-torch.log(u))


@torch.no_grad()
def sample(
    state: Stage2State,
    n: int,
    steps: int,
    condition: Optional[ConditionPayload] = None,
    seed: int = 0,
    temperature: Optional[float] = None,
    gumbel_temperature: Optional[float] = None,
    init_tokens: Optional[torch.Tensor] = None,
    init_mask: Optional[torch.Tensor] = None,
    return_history: bool = False,
):
    """
    Iterative confidence-based decoding.

    Every step predicts all masked positions, draws a candidate token for
    each, and commits the most confident candidates so that exactly
    ``mask_schedule(masked, steps)[t + 1]`` positions remain masked.
    Confidence is the candidate's log-probability plus Gumbel noise whose
    scale anneals linearly from ``gumbel_temperature`` to 0. Committed
    tokens never change.

    Args:
        state: Trained prior
        n: Number of sequences
        steps: Decoding steps T >= 1
        condition: Model condition, required for conditional priors
        seed: Seeds candidate draws and noise
        temperature: Softmax temperature of candidate draws, 0 takes the argmax
        gumbel_temperature: Initial confidence noise scale
        init_tokens: (n, L) starting tokens for partial resampling
        init_mask: (n, L) bool, positions of ``init_tokens`` to resample
        return_history: Also return the committed-position mask after each step

    Returns:
        (n, L) token ids in [0, K), plus the history when requested

    Raises:
        SamplingError: If the model produces non-finite logits
    """
    model = state.model.eval()
    mg = state.config.maskgit
    temperature = mg.sample_temperature if temperature is None else temperature
    gumbel_temperature = mg.gumbel_temperature if gumbel_temperature is None else gumbel_temperature
    if steps < 1:
        raise ValidationError("Decoding needs at least one step", field="steps", value=steps)

    length, vocab = model.length, model.codebook_size
    generator = torch.Generator().manual_seed(seed)
    if init_tokens is None:
        tokens = torch.full((n, length), model.mask_id, dtype=torch.long)
        committed = torch.zeros(n, length, dtype=torch.bool)
    else:
        committed = ~init_mask.bool() if init_mask is not None else torch.zeros(n, length, dtype=torch.bool)
        tokens = torch.where(committed, init_tokens.long(), torch.full_like(init_tokens.long(), model.mask_id))

    masked = (~committed).sum(dim=1).tolist()
    targets = torch.tensor([mask_schedule(m, steps) for m in masked], dtype=torch.long)
    cond = condition.batch(n) if condition is not None else None
    history = []

    for t in range(steps):
        logits = model(tokens, cond).double()
        if not torch.isfinite(logits).all():
            raise SamplingError("Prior produced non-finite logits", step=t)

        if temperature > 0:
            log_probs = F.log_softmax(logits / temperature, dim=-1)
            candidates = torch.multinomial(log_probs.exp().reshape(-1, vocab), 1, generator=generator).reshape(n, length)
        else:
            log_probs = F.log_softmax(logits, dim=-1)
            candidates = logits.argmax(dim=-1)
        confidence = log_probs.gather(-1, candidates[..., None]).squeeze(-1)
        confidence = confidence + gumbel_temperature * (1.0 - t / steps) * _gumbel((n, length), generator)
        confidence = torch.where(committed, torch.full_like(confidence, math.inf), confidence)

        keep = length - targets[:, t + 1]
        order = torch.sort(confidence, dim=1, descending=True, stable=True).indices
        ranks = order.argsort(dim=1)
        now_committed = ranks < keep[:, None]
        tokens = torch.where(now_committed & ~committed, candidates, tokens)
        committed = now_committed
        if return_history:
            history.append(committed.clone())

    if (tokens >= vocab).any():
        raise SamplingError("Decoding finished with masked positions left", step=steps)
    return (tokens, history) if return_history else tokens


def vary(
    stage1: Stage1State,
    stage2: Stage2State,
    source: ObjectSample,
    mask_ratio: float,
    seed: int,
    n: int = 1,
    steps: Optional[int] = None,
    temperature: Optional[float] = None,
) -> torch.Tensor:
    """
    Variations of a reconstructed asset.

    The source's tokens are masked at ``mask_ratio`` and the masked positions
    resampled by the prior; every other token is kept as reconstructed. The
    prior's condition is read from the source sample.

    Returns:
        (n, L) token sequences
    """
    check_vocabulary(stage1, stage2)
    tokens = extract_tokens(stage1, [source])
    if mask_ratio == 0:
        return tokens.expand(n, -1).clone()
    _, positions = mask_tokens(tokens[0], mask_ratio, seed, stage2.model.mask_id)
    spec = condition_from_sample(source, stage2.condition_kind)
    payload = encode_condition(spec, stage2.condition_kind, stage2.config)
    return sample(
        stage2,
        n,
        steps or stage2.config.decode_steps,
        condition=payload,
        seed=seed,
        temperature=temperature,
        init_tokens=tokens.expand(n, -1),
        init_mask=positions.expand(n, -1),
    )
