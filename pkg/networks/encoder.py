"""Image to tri-plane encoder: patch tokens, ViT blocks, cross-attention against learnable plane queries."""

import torch
from einops import rearrange
from torch import nn

from libs.exceptions import ValidationError
from libs.schema import PipelineConfig
from networks.layers import CrossAttentionBlock, learnable_embedding, transformer_stack, trunc_normal_init


class PatchEmbedding(nn.Module):
    """
    Split an image into non-overlapping square patches and project them.

    A CLS token is appended after the patch tokens and a learnable position
    embedding is added to all of them.
    """

    def __init__(self, image_resolution: int, patch_size: int, embed_dim: int):
        super().__init__()
        if image_resolution % patch_size:
            raise ValidationError(
                f"Image resolution {image_resolution} is not divisible by patch size {patch_size}",
                field="image_resolution",
                value=image_resolution,
            )
        self.patch_size = patch_size
        self.num_patches = (image_resolution // patch_size) ** 2
        self.proj = nn.Conv2d(3, embed_dim, kernel_size=patch_size, stride=patch_size)
        self.cls_token = learnable_embedding(1, 1, embed_dim)
        self.pos_embed = learnable_embedding(1, self.num_patches + 1, embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """
        Args:
            images: (B, 3, H, W)

        Returns:
            (B, (H/P)*(W/P) + 1, E) tokens, CLS last

        Raises:
            ValidationError: If H or W is not a multiple of the patch size
        """
        _, _, height, width = images.shape
        if height % self.patch_size or width % self.patch_size:
            raise ValidationError(
                f"Image of H={height}, W={width} is not divisible into {self.patch_size}px patches",
                field="image",
                value=(height, width),
            )
        tokens = rearrange(self.proj(images), "b e h w -> b (h w) e")
        if tokens.shape[1] != self.num_patches:
            raise ValidationError(
                f"Image of H={height}, W={width} yields {tokens.shape[1]} patches, expected {self.num_patches}",
                field="image",
                value=(height, width),
            )
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        return torch.cat([tokens, cls], dim=1) + self.pos_embed


class TriPlaneEncoder(nn.Module):
    """Maps (B, 3, H, W) images to (B, N_Z, N_Z, 3, D_tok) embeddings in (-1, 1)."""

    def __init__(self, config: PipelineConfig):
        super().__init__()
        enc = config.encoder
        self.image_resolution = config.image_resolution
        self.latent_grid = config.latent_grid
        self.patch_embed = PatchEmbedding(config.image_resolution, enc.patch_size, enc.embed_dim)
        self.blocks = transformer_stack(enc.embed_dim, enc.num_heads, enc.hidden_dim, enc.vit_blocks)
        self.norm = nn.LayerNorm(enc.embed_dim)

        # One learnable query per tri-plane cell, planes ordered xy, xz, yz
        self.plane_queries = learnable_embedding(3, config.latent_grid, config.latent_grid, enc.embed_dim)
        self.query_proj = nn.Linear(enc.embed_dim, enc.embed_dim)
        self.cross_blocks = nn.ModuleList(
            CrossAttentionBlock(enc.embed_dim, enc.num_heads, enc.hidden_dim) for _ in range(enc.cross_blocks)
        )
        self.head = nn.Sequential(nn.Linear(enc.embed_dim, config.token_dim), nn.LayerNorm(config.token_dim), nn.Tanh())
        self.apply(trunc_normal_init)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[-1] != self.image_resolution:
            raise ValidationError(
                f"Encoder expects (B, 3, {self.image_resolution}, {self.image_resolution}) images",
                field="image",
                value=tuple(images.shape),
            )
        context = self.patch_embed(images)
        for block in self.blocks:
            context = block(context)
        context = self.norm(context)

        queries = rearrange(self.plane_queries, "p i j e -> (p i j) e")
        queries = self.query_proj(queries).unsqueeze(0).expand(images.shape[0], -1, -1)
        for block in self.cross_blocks:
            queries = block(queries, context)

        out = self.head(queries)
        return rearrange(out, "b (p i j) d -> b i j p d", p=3, i=self.latent_grid, j=self.latent_grid)


def premask_images(images: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Whiten pixels outside the object mask: x * m + (1 - m)."""
    masks = masks.to(images.dtype)
    if masks.ndim == images.ndim - 1:
        masks = masks.unsqueeze(1)
    return images * masks + (1.0 - masks)
