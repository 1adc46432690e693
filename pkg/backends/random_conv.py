"""Deterministic feature backends built on a frozen, seeded random conv pyramid."""

import math
from typing import List, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from backends.base import EMBEDDING, PERCEPTUAL, EmbeddingBackend, PerceptualBackend, register_backend

PYRAMID_SEED = 1234
EMBEDDING_RESOLUTION = 64


class RandomConvPyramid(nn.Module):
    """Stride-2 conv stack with He-scaled random weights drawn from a fixed seed."""

    def __init__(self, channels: Sequence[int] = (16, 32, 64), seed: int = PYRAMID_SEED):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        layers = []
        in_channels = 3
        for out_channels in channels:
            conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=2, padding=1)
            fan_in = in_channels * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            layers.append(conv)
            in_channels = out_channels
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, images: torch.Tensor) -> List[torch.Tensor]:
        features = []
        x = images * 2.0 - 1.0
        for conv in self.layers:
            x = F.leaky_relu(conv(x), 0.2)
            features.append(x)
        return features


class PatchFeatureBackend(PerceptualBackend):
    """Sum over pyramid levels of the mean squared feature difference."""

    name = "patch_feature"

    def __init__(self):
        self.pyramid = RandomConvPyramid()

    def distance(self, prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        self.pyramid.to(dtype=prediction.dtype)
        total = prediction.new_zeros(())
        for a, b in zip(self.pyramid(prediction), self.pyramid(target)):
            total = total + ((a - b) ** 2).mean()
        return total


class DisabledPerceptualBackend(PerceptualBackend):
    """Perceptual term switched off."""

    name = "disabled"

    def distance(self, prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        return prediction.new_zeros(())


class RandomConvEmbedding(EmbeddingBackend):
    """Global-average-pooled last pyramid level, 64 dimensions."""

    name = "random_conv"
    dimension = 64

    def __init__(self, batch_size: int = 64):
        self.pyramid = RandomConvPyramid(channels=(16, 32, self.dimension))
        self.batch_size = batch_size

    @torch.no_grad()
    def embed(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        if images.shape[0] == 0:
            return np.zeros((0, self.dimension))
        chunks = []
        for start in range(0, images.shape[0], self.batch_size):
            batch = torch.from_numpy(images[start:start + self.batch_size]).permute(0, 3, 1, 2)
            if batch.shape[-1] != EMBEDDING_RESOLUTION or batch.shape[-2] != EMBEDDING_RESOLUTION:
                batch = F.interpolate(batch, size=(EMBEDDING_RESOLUTION, EMBEDDING_RESOLUTION), mode="area")
            features = self.pyramid(batch)[-1]
            chunks.append(features.mean(dim=(2, 3)).double().numpy())
        return np.concatenate(chunks, axis=0)


register_backend(PERCEPTUAL, PatchFeatureBackend.name, PatchFeatureBackend)
register_backend(PERCEPTUAL, DisabledPerceptualBackend.name, DisabledPerceptualBackend)
register_backend(EMBEDDING, RandomConvEmbedding.name, RandomConvEmbedding)
