"""Tri-plane decoder: token transformer with CLS, style mapping and per-plane modulated-conv generators."""

import math
from typing import List, Tuple

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from libs.schema import PipelineConfig
from networks.field import FieldDecoder, TriPlaneField
from networks.layers import (
    EqualizedLinear,
    EqualizedWeight,
    learnable_embedding,
    stage_channels,
    transformer_stack,
    trunc_normal_init,
)


class TokenTransformer(nn.Module):
    """Lifts quantized tokens to wider features and summarizes them in a CLS token."""

    def __init__(self, config: PipelineConfig):
        super().__init__()
        dec = config.decoder
        self.latent_grid = config.latent_grid
        length = config.sequence_length
        self.input_proj = nn.Linear(config.token_dim, dec.token_embed_dim)
        self.cls_token = learnable_embedding(1, 1, dec.token_embed_dim)
        self.pos_embed = learnable_embedding(1, length + 1, dec.token_embed_dim)
        self.blocks = transformer_stack(dec.token_embed_dim, dec.token_heads, dec.token_hidden_dim, dec.token_blocks)
        self.norm = nn.LayerNorm(dec.token_embed_dim)
        self.head = nn.Sequential(
            nn.Linear(dec.token_embed_dim, dec.token_out_dim),
            nn.LayerNorm(dec.token_out_dim),
            nn.Tanh(),
        )
        self.apply(trunc_normal_init)

    def forward(self, vectors: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            vectors: (B, N_Z, N_Z, 3, D_tok) quantized latents

        Returns:
            features (B, N_Z, N_Z, 3, token_out_dim) and cls (B, token_embed_dim)
        """
        tokens = self.input_proj(rearrange(vectors, "b i j p d -> b (p i j) d"))
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        x = torch.cat([tokens, cls], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        features = rearrange(self.head(x[:, :-1]), "b (p i j) d -> b i j p d", p=3, i=self.latent_grid)
        return features, x[:, -1]


class MappingNetwork(nn.Module):
    """MLP from the CLS summary to the style vector w."""

    def __init__(self, in_dim: int, style_dim: int, num_layers: int):
        super().__init__()
        layers: List[nn.Module] = []
        for i in range(num_layers):
            layers.append(EqualizedLinear(in_dim if i == 0 else style_dim, style_dim))
            layers.append(nn.LeakyReLU(negative_slope=0.2, inplace=True))
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        z = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        return self.net(z)


class Conv2dWeightModulate(nn.Module):
    """Convolution whose weights are scaled per sample by a style vector, optionally demodulated."""

    def __init__(self, in_features: int, out_features: int, kernel_size: int, demodulate: bool = True, eps: float = 1e-8):
        super().__init__()
        self.out_features = out_features
        self.demodulate = demodulate
        self.padding = (kernel_size - 1) // 2
        self.weight = EqualizedWeight([out_features, in_features, kernel_size, kernel_size])
        self.eps = eps

    def forward(self, x: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        weights = self.weight()[None, :, :, :, :] * s[:, None, :, None, None]
        if self.demodulate:
            sigma_inv = torch.rsqrt((weights ** 2).sum(dim=(2, 3, 4), keepdim=True) + self.eps)
            weights = weights * sigma_inv

        x = x.reshape(1, -1, h, w)
        _, _, *ws = weights.shape
        weights = weights.reshape(b * self.out_features, *ws)
        x = F.conv2d(x, weights, padding=self.padding, groups=b)
        return x.reshape(-1, self.out_features, h, w)


class StyleConv(nn.Module):
    """Modulated 3x3 convolution, bias and leaky ReLU."""

    def __init__(self, style_dim: int, in_features: int, out_features: int):
        super().__init__()
        self.to_style = EqualizedLinear(style_dim, in_features, bias=1.0)
        self.conv = Conv2dWeightModulate(in_features, out_features, kernel_size=3)
        self.bias = nn.Parameter(torch.zeros(out_features))
        self.activation = nn.LeakyReLU(0.2, True)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        x = self.conv(x, self.to_style(w))
        return self.activation(x + self.bias[None, :, None, None])


class UpBlock(nn.Module):
    """Bilinear 2x upsampling followed by two style convolutions."""

    def __init__(self, style_dim: int, in_features: int, out_features: int):
        super().__init__()
        self.conv1 = StyleConv(style_dim, in_features, out_features)
        self.conv2 = StyleConv(style_dim, out_features, out_features)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.conv2(self.conv1(x, w), w)


class ToPlane(nn.Module):
    """1x1 modulated projection to the plane channels, without demodulation."""

    def __init__(self, style_dim: int, in_features: int, out_features: int):
        super().__init__()
        self.to_style = EqualizedLinear(style_dim, in_features, bias=1.0)
        self.conv = Conv2dWeightModulate(in_features, out_features, kernel_size=1, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(out_features))

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        return self.conv(x, self.to_style(w)) + self.bias[None, :, None, None]


class PlaneGenerator(nn.Module):
    """
    Upsamples one N_Z x N_Z feature plane to N_H x N_H with D_H channels.

    The stem is a style convolution at N_Z that maps token features to the
    first width; every following block doubles the resolution, so there are
    log2(N_H / N_Z) blocks. ``up_channels`` lists the block widths and is
    padded with its first entry when more doublings are needed: the paper
    preset (16 to 256, widths 512/256/128) runs four blocks of widths
    512, 512, 256 and 128.
    """

    def __init__(self, config: PipelineConfig):
        super().__init__()
        dec = config.decoder
        num_up = int(math.log2(config.plane_resolution // config.latent_grid))
        channels = stage_channels(dec.up_channels, max(num_up, 1))
        self.stem = StyleConv(dec.style_dim, dec.token_out_dim, channels[0])
        self.blocks = nn.ModuleList(
            UpBlock(dec.style_dim, channels[max(i - 1, 0)], channels[i]) for i in range(num_up)
        )
        self.to_plane = ToPlane(dec.style_dim, channels[-1], config.plane_channels)

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        x = self.stem(x, w)
        for block in self.blocks:
            x = block(x, w)
        return self.to_plane(x, w)


class PlaneSynthesizer(nn.Module):
    """Three plane generators sharing one style vector; output (B, 3, D_H, N_H, N_H)."""

    def __init__(self, config: PipelineConfig):
        super().__init__()
        self.generators = nn.ModuleList(PlaneGenerator(config) for _ in range(3))

    def forward(self, features: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        planes = []
        for p, generator in enumerate(self.generators):
            x = rearrange(features[:, :, :, p], "b i j d -> b d i j")
            planes.append(generator(x, w))
        return torch.stack(planes, dim=1)


class TriPlaneDecoder(nn.Module):
    """Quantized latents to feature planes, plus the field MLP that turns planes into a radiance field."""

    def __init__(self, config: PipelineConfig):
        super().__init__()
        dec = config.decoder
        self.token_transformer = TokenTransformer(config)
        self.mapping = MappingNetwork(dec.token_embed_dim, dec.style_dim, dec.mapping_layers)
        self.synthesizer = PlaneSynthesizer(config)
        self.field_decoder = FieldDecoder(
            config.plane_channels,
            dec.field_hidden_dim,
            config.semantic_dim if config.semantic_field else 0,
        )

    def synthesize(self, features: torch.Tensor, cls: torch.Tensor) -> torch.Tensor:
        return self.synthesizer(features, self.mapping(cls))

    def forward(self, vectors: torch.Tensor) -> torch.Tensor:
        features, cls = self.token_transformer(vectors)
        return self.synthesize(features, cls)

    def field(self, planes: torch.Tensor, extent) -> TriPlaneField:
        """Radiance field of one asset's planes (3, D_H, N_H, N_H)."""
        return TriPlaneField(planes, self.field_decoder, extent)
