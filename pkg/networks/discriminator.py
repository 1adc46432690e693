"""Residual image discriminator for the adversarial reconstruction term."""

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from libs.exceptions import ConfigurationError
from networks.layers import EqualizedConv2d, EqualizedLinear


class DiscriminatorBlock(nn.Module):
    """Two 3x3 convolutions and a 2x downsample with a 1x1 residual path."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.residual = EqualizedConv2d(in_features, out_features, kernel_size=1)
        self.block = nn.Sequential(
            EqualizedConv2d(in_features, in_features, kernel_size=3, padding=1),
            nn.LeakyReLU(0.2, True),
            EqualizedConv2d(in_features, out_features, kernel_size=3, padding=1),
            nn.LeakyReLU(0.2, True),
        )
        self.scale = 1 / math.sqrt(2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        residual = self.residual(F.avg_pool2d(x, 2))
        x = F.avg_pool2d(self.block(x), 2)
        return (x + residual) * self.scale


class Discriminator(nn.Module):
    """
    Maps (B, 3, R, R) images in [0, 1] to one logit each.

    ``channels[0]`` is the width after the RGB stem; every further entry adds a
    block halving the resolution.
    """

    def __init__(self, resolution: int, channels: Sequence[int] = (16, 32, 64, 128)):
        super().__init__()
        final = resolution // (2 ** (len(channels) - 1))
        if final < 1:
            raise ConfigurationError(
                f"Discriminator with {len(channels)} levels cannot downsample {resolution}px images",
                config_key="discriminator.channels",
            )
        self.from_rgb = nn.Sequential(EqualizedConv2d(3, channels[0], kernel_size=1), nn.LeakyReLU(0.2, True))
        self.blocks = nn.Sequential(*[DiscriminatorBlock(channels[i], channels[i + 1]) for i in range(len(channels) - 1)])
        self.conv = EqualizedConv2d(channels[-1], channels[-1], kernel_size=3, padding=1)
        self.final = EqualizedLinear(channels[-1] * final * final, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.from_rgb(x * 2.0 - 1.0)
        x = self.blocks(x)
        x = F.leaky_relu(self.conv(x), 0.2)
        return self.final(x.reshape(x.shape[0], -1)).squeeze(-1)
