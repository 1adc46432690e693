"""Bidirectional masked-token transformer over flattened tri-plane token sequences."""

from typing import Optional

import torch
from torch import nn

from libs.exceptions import ValidationError
from libs.schema import PipelineConfig
from networks.layers import learnable_embedding, transformer_stack, trunc_normal_init

CONDITION_MODES = ("none", "discrete", "continuous")


class MaskTransformer(nn.Module):
    """
    Predicts codebook logits for every position of a token sequence.

    Vocabulary layout: ids [0, K) are codebook entries, K is MASK and
    K + 1 + c is the token of discrete condition class c, appended after the
    tri-plane tokens. Continuous conditions are projected and concatenated
    to every token embedding instead.
    """

    def __init__(
        self,
        config: PipelineConfig,
        condition_mode: str = "none",
        num_classes: int = 0,
        condition_dim: int = 0,
    ):
        super().__init__()
        if condition_mode not in CONDITION_MODES:
            raise ValidationError(f"Unknown condition mode '{condition_mode}'", field="condition_mode")
        if condition_mode == "discrete" and num_classes < 1:
            raise ValidationError("Discrete conditioning needs at least one class", field="num_classes")
        if condition_mode == "continuous" and condition_dim < 1:
            raise ValidationError("Continuous conditioning needs a positive width", field="condition_dim")

        mg = config.maskgit
        self.codebook_size = config.codebook_size
        self.mask_id = config.codebook_size
        self.length = config.sequence_length
        self.condition_mode = condition_mode
        self.num_classes = num_classes if condition_mode == "discrete" else 0
        self.condition_dim = condition_dim if condition_mode == "continuous" else 0

        vocab_size = self.codebook_size + 1 + self.num_classes
        token_width = mg.embed_dim - mg.condition_proj_dim if self.condition_dim else mg.embed_dim
        self.tok_emb = nn.Embedding(vocab_size, token_width)
        self.cond_proj = nn.Linear(self.condition_dim, mg.condition_proj_dim) if self.condition_dim else None
        self.pos_emb = learnable_embedding(1, self.length + (1 if self.num_classes else 0), mg.embed_dim)
        self.ln = nn.LayerNorm(mg.embed_dim)
        self.drop = nn.Dropout(mg.dropout)
        self.blocks = transformer_stack(mg.embed_dim, mg.num_heads, mg.hidden_dim, mg.num_layers, mg.dropout)
        self.norm = nn.LayerNorm(mg.embed_dim)
        self.head = nn.Linear(mg.embed_dim, self.codebook_size)
        self.apply(trunc_normal_init)

    @property
    def vocab_size(self) -> int:
        return self.tok_emb.num_embeddings

    def condition_token(self, classes: torch.Tensor) -> torch.Tensor:
        """Vocabulary id of each discrete condition class."""
        if classes.numel() and (classes.min() < 0 or classes.max() >= self.num_classes):
            raise ValidationError(
                f"Condition class outside [0, {self.num_classes})",
                field="discrete_value",
                value=classes.tolist(),
            )
        return classes.long() + self.codebook_size + 1

    def forward(self, tokens: torch.Tensor, condition: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Args:
            tokens: (B, L) ids in [0, K], MASK allowed
            condition: (B,) class indices for discrete mode, (B, D_c) vectors for continuous mode

        Returns:
            (B, L, K) logits over codebook entries
        """
        if tokens.shape[1] != self.length:
            raise ValidationError(
                f"Token sequence length {tokens.shape[1]} does not match {self.length}",
                field="tokens",
                value=tuple(tokens.shape),
            )
        if self.condition_mode != "none" and condition is None:
            raise ValidationError(f"{self.condition_mode} conditioning requires a condition", field="condition")

        if self.num_classes:
            tokens = torch.cat([tokens, self.condition_token(condition)[:, None]], dim=1)
        x = self.tok_emb(tokens)
        if self.cond_proj is not None:
            projected = self.cond_proj(condition.to(x.dtype))
            x = torch.cat([x, projected[:, None, :].expand(-1, x.shape[1], -1)], dim=-1)

        x = self.drop(self.ln(x + self.pos_emb))
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x[:, :self.length]))
