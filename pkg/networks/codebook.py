"""Vector-quantization codebook with straight-through gradients and the VQ/commitment loss."""

import math
from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn.functional as F
from torch import nn

from libs.exceptions import ValidationError

TIE_TOLERANCE = 1e-9


@dataclass
class QuantizedLatents:
    """Selected codebook vectors and their indices, one per tri-plane cell."""

    vectors: torch.Tensor
    indices: torch.Tensor


class Codebook(nn.Module):
    """
    K learnable entries of width D.

    With ``l2_codes`` enabled the entries are used unit-normalized and the
    stored rows are renormalized after every optimizer step.
    """

    def __init__(self, codebook_size: int, dim: int, l2_codes: bool = True):
        super().__init__()
        self.codebook_size = codebook_size
        self.dim = dim
        self.l2_codes = l2_codes
        bound = math.sqrt(3.0 / dim)
        self.entries = nn.Parameter(torch.empty(codebook_size, dim).uniform_(-bound, bound))
        if l2_codes:
            self.renormalize_()

    def codes(self) -> torch.Tensor:
        """Entries as used for lookup."""
        if self.l2_codes:
            return F.normalize(self.entries, dim=-1)
        return self.entries

    def quantize(self, embeddings: torch.Tensor) -> QuantizedLatents:
        """
        Nearest-entry lookup for every vector of the last axis.

        Distances are taken in double precision; ties go to the lowest index.

        Args:
            embeddings: (..., D) finite values

        Returns:
            QuantizedLatents with vectors (..., D) and indices (...)

        Raises:
            ValidationError: If the input is not finite or has the wrong width
        """
        if embeddings.shape[-1] != self.dim:
            raise ValidationError(
                f"Embedding width {embeddings.shape[-1]} does not match codebook width {self.dim}",
                field="embeddings",
                value=tuple(embeddings.shape),
            )
        if not torch.isfinite(embeddings).all():
            raise ValidationError("Embeddings contain non-finite values", field="embeddings")

        codes = self.codes()
        flat = embeddings.reshape(-1, self.dim)
        with torch.no_grad():
            distances = torch.cdist(
                flat.detach().double(), codes.detach().double(), compute_mode="donot_use_mm_for_euclid_dist"
            ).pow(2)
            best = distances.min(dim=1, keepdim=True).values
            # entries equidistant up to rounding resolve to the lowest index
            ties = distances <= best + TIE_TOLERANCE * (1.0 + best)
            indices = ties.int().argmax(dim=1)
        indices = indices.reshape(embeddings.shape[:-1])
        return QuantizedLatents(vectors=codes[indices], indices=indices)

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        """
        Codebook vectors for integer indices.

        Raises:
            ValidationError: If any index lies outside [0, K)
        """
        if indices.numel() and (indices.min() < 0 or indices.max() >= self.codebook_size):
            raise ValidationError(
                f"Token index out of range [0, {self.codebook_size})",
                field="indices",
                value=(int(indices.min()), int(indices.max())),
            )
        return self.codes()[indices.long()]

    @torch.no_grad()
    def renormalize_(self) -> None:
        """Project stored rows back onto the unit sphere."""
        if not self.l2_codes:
            return
        norms = self.entries.norm(dim=-1)
        if torch.all((norms - 1.0).abs() <= 1e-6):
            return
        self.entries.copy_(F.normalize(self.entries, dim=-1))


def straight_through(embeddings: torch.Tensor, vectors: torch.Tensor) -> torch.Tensor:
    """Forward value of ``vectors``; gradient passes to ``embeddings`` unchanged."""
    return embeddings + (vectors - embeddings).detach()


def vq_loss_terms(embeddings: torch.Tensor, vectors: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Codebook and commitment terms, each summed over D and averaged over cells.

    Returns:
        (||sg[e] - z||^2, ||sg[z] - e||^2)
    """
    codebook_term = (embeddings.detach() - vectors).pow(2).sum(dim=-1).mean()
    commitment_term = (vectors.detach() - embeddings).pow(2).sum(dim=-1).mean()
    return codebook_term, commitment_term


def vq_loss(embeddings: torch.Tensor, vectors: torch.Tensor, commitment_weight: float = 0.25) -> torch.Tensor:
    """Codebook term plus weighted commitment term."""
    if embeddings.shape != vectors.shape:
        raise ValidationError(
            "Embeddings and codebook vectors differ in shape",
            field="vectors",
            value=(tuple(embeddings.shape), tuple(vectors.shape)),
        )
    codebook_term, commitment_term = vq_loss_terms(embeddings, vectors)
    return codebook_term + commitment_weight * commitment_term


def codebook_usage(indices: torch.Tensor, codebook_size: int) -> torch.Tensor:
    """Histogram of selected indices, length K, summing to the number of cells."""
    return torch.bincount(indices.reshape(-1).long(), minlength=codebook_size)
