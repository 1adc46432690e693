"""Test configuration and fixtures."""

from pathlib import Path
from typing import Callable, Iterator, List

import pytest
import torch

from libs.dataset import ObjectSample
from libs.schema import PipelineConfig, load_config
from synthetic.generator import generate_dataset, generate_samples


# Small enough that a full stage-1 step runs in well under a second on CPU
TINY_OVERRIDES = {
    "image_resolution": 32,
    "render_resolution": 16,
    "latent_grid": 2,
    "token_dim": 8,
    "codebook_size": 16,
    "plane_resolution": 8,
    "plane_channels": 4,
    "samples_uniform": 6,
    "samples_importance": 2,
    "decode_steps": 3,
    "semantic_dim": 4,
    "mesh_resolution": 16,
    "encoder": {
        "patch_size": 8,
        "embed_dim": 16,
        "hidden_dim": 32,
        "num_heads": 2,
        "vit_blocks": 1,
        "cross_blocks": 1,
    },
    "decoder": {
        "token_embed_dim": 16,
        "token_hidden_dim": 32,
        "token_heads": 2,
        "token_blocks": 1,
        "token_out_dim": 8,
        "style_dim": 16,
        "mapping_layers": 2,
        "up_channels": [16, 8],
        "field_hidden_dim": 16,
    },
    "discriminator": {"channels": [8, 16]},
    "maskgit": {
        "num_layers": 1,
        "num_heads": 2,
        "embed_dim": 16,
        "hidden_dim": 32,
        "condition_proj_dim": 4,
        "batch_size": 4,
        "dropout": 0.0,
    },
    "train": {"batch_size": 2, "log_every": 1, "gan_warmup_steps": 0},
}


@pytest.fixture
def tiny_config() -> PipelineConfig:
    """
    Configuration with every network shrunk to a few channels.

    Returns:
        PipelineConfig: Validated tiny configuration
    """
    return load_config("desk", overrides=TINY_OVERRIDES)


@pytest.fixture
def tiny_samples(tiny_config: PipelineConfig) -> List[ObjectSample]:
    """Four unoccluded synthetic samples, one per class."""
    return generate_samples(4, tiny_config, seed=3, occlusion_prob=0.0)


@pytest.fixture
def tiny_dataset(tmp_path: Path, tiny_config: PipelineConfig) -> Path:
    """
    Write a small synthetic dataset.

    Returns:
        Path: Dataset directory
    """
    return generate_dataset(6, tiny_config, seed=11, out_dir=tmp_path / "data", occlusion_prob=0.0)


@pytest.fixture
def float64() -> Iterator[None]:
    """Run the test with float64 as the default torch dtype."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


@pytest.fixture
def finite_difference() -> Callable[[Callable[[torch.Tensor], torch.Tensor], torch.Tensor, float], torch.Tensor]:
    """Central-difference gradient of a scalar function, one coordinate at a time."""

    def gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
        grad = torch.zeros_like(x)
        flat = grad.view(-1)
        for i in range(x.numel()):
            step = torch.zeros_like(x).view(-1)
            step[i] = eps
            step = step.view_as(x)
            flat[i] = (fn(x + step) - fn(x - step)) / (2 * eps)
        return grad

    return gradient
