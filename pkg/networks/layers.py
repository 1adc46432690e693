"""Building blocks shared by the transformers, generator and discriminator."""

import math
from typing import List, Sequence

import torch
import torch.nn.functional as F
from torch import nn


class FeedForward(nn.Module):
    """Two-layer MLP with GELU."""

    def __init__(self, dim: int, hidden_dim: int, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden_dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden_dim, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class SelfAttentionBlock(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, hidden_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, hidden_dim, dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ff(self.norm2(x))


class CrossAttentionBlock(nn.Module):
    """
    Pre-norm block where queries attend to a context sequence.

    Queries never attend to each other, so every output slot is a function
    of its own query and the context only.
    """

    def __init__(self, dim: int, num_heads: int, hidden_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, hidden_dim, dropout)

    def forward(self, queries: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        kv = self.norm_kv(context)
        queries = queries + self.attn(self.norm_q(queries), kv, kv, need_weights=False)[0]
        return queries + self.ff(self.norm2(queries))


def transformer_stack(dim: int, num_heads: int, hidden_dim: int, depth: int, dropout: float = 0.0) -> nn.ModuleList:
    return nn.ModuleList(SelfAttentionBlock(dim, num_heads, hidden_dim, dropout) for _ in range(depth))


class EqualizedWeight(nn.Module):
    """Weight stored at unit variance and scaled by 1/sqrt(fan_in) at use time."""

    def __init__(self, shape: List[int]):
        super().__init__()
        self.c = 1.0 / math.sqrt(math.prod(shape[1:]))
        self.weight = nn.Parameter(torch.randn(shape))

    def forward(self) -> torch.Tensor:
        return self.weight * self.c


class EqualizedLinear(nn.Module):
    """Linear layer with equalized learning rate."""

    def __init__(self, in_features: int, out_features: int, bias: float = 0.0):
        super().__init__()
        self.weight = EqualizedWeight([out_features, in_features])
        self.bias = nn.Parameter(torch.ones(out_features) * bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight(), bias=self.bias)


class EqualizedConv2d(nn.Module):
    """2D convolution with equalized learning rate."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, padding: int = 0):
        super().__init__()
        self.padding = padding
        self.weight = EqualizedWeight([out_channels, in_channels, kernel_size, kernel_size])
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.weight(), bias=self.bias, padding=self.padding)


def trunc_normal_init(module: nn.Module, std: float = 0.02) -> None:
    """Truncated-normal weights and zero biases for linear and embedding layers."""
    if isinstance(module, (nn.Linear, nn.Embedding)):
        nn.init.trunc_normal_(module.weight, std=std, a=-2 * std, b=2 * std)
        if isinstance(module, nn.Linear) and module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def learnable_embedding(*shape: int, std: float = 0.02) -> nn.Parameter:
    """Parameter initialized from a truncated normal."""
    return nn.Parameter(nn.init.trunc_normal_(torch.zeros(shape), std=std, a=-2 * std, b=2 * std))


def stage_channels(up_channels: Sequence[int], num_stages: int) -> List[int]:
    """
    Channel width of each upsampling stage.

    Missing leading stages repeat the first width; surplus widths are taken
    from the end so the last stage keeps the narrowest width.
    """
    channels = list(up_channels)
    if num_stages >= len(channels):
        return [channels[0]] * (num_stages - len(channels)) + channels
    return channels[len(channels) - num_stages:]
