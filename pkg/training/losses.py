"""Stage-1 objective terms. Images are (B, 3, H, W); masks and alpha are (B, H, W)."""

from typing import Callable, Optional, Tuple

import torch
import torch.nn.functional as F

from backends.base import PerceptualBackend
from libs.exceptions import ValidationError

MASK_OVERLAP_TOLERANCE = 1e-6


def _expand(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    mask = mask.to(like.dtype)
    return mask.unsqueeze(1) if mask.ndim == like.ndim - 1 else mask


def masked_l2(prediction: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over pixels and channels of ((prediction - target) * mask)^2."""
    m = _expand(mask, prediction)
    return ((prediction - target) * m).pow(2).mean()


def loss_rgb(
    prediction: torch.Tensor,
    target: torch.Tensor,
    mask: torch.Tensor,
    perceptual: Optional[PerceptualBackend] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Masked reconstruction loss.

    Args:
        prediction: Rendered images
        target: Ground-truth images
        mask: Visible object pixels
        perceptual: Backend comparing the masked images; None disables the term

    Returns:
        (l2 term, perceptual term)
    """
    l2 = masked_l2(prediction, target, mask)
    if perceptual is None:
        return l2, prediction.new_zeros(())
    m = _expand(mask, prediction)
    return l2, perceptual.distance(prediction * m, target * m)


def loss_alpha(alpha: torch.Tensor, mask: torch.Tensor, skyroad: torch.Tensor) -> torch.Tensor:
    """
    Occlusion-aware silhouette loss: object pixels pulled to 1, sky/road pixels to 0.

    Pixels in neither mask (occluders) contribute nothing.

    Raises:
        ValidationError: If the masks overlap
    """
    mask = mask.to(alpha.dtype)
    skyroad = skyroad.to(alpha.dtype)
    if torch.any(mask + skyroad > 1.0 + MASK_OVERLAP_TOLERANCE):
        raise ValidationError("Object mask overlaps the sky/road mask", field="skyroad_mask")
    return ((alpha - 1.0).pow(2) * mask + alpha.pow(2) * skyroad).mean()


def generator_gan_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term, softplus(-D(fake))."""
    return F.softplus(-fake_logits).mean()


def discriminator_gan_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """softplus(-D(real)) + softplus(D(fake))."""
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def r1_penalty(real_logits: torch.Tensor, real_images: torch.Tensor, gamma: float) -> torch.Tensor:
    """gamma / 2 times the batch mean of ||grad_x D(x)||^2 on real images."""
    if not real_logits.requires_grad:
        return real_logits.new_zeros(())
    (grad,) = torch.autograd.grad(real_logits.sum(), real_images, create_graph=True, allow_unused=True)
    if grad is None:
        return real_logits.new_zeros(())
    return 0.5 * gamma * grad.pow(2).reshape(grad.shape[0], -1).sum(dim=1).mean()


def loss_gan(
    real: torch.Tensor,
    fake: torch.Tensor,
    discriminator: Callable[[torch.Tensor], torch.Tensor],
    r1_gamma: float = 0.0,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Adversarial terms for one batch.

    The discriminator sees ``fake`` detached; the generator term keeps the
    graph through ``fake``.

    Returns:
        (generator term, discriminator data term, R1 penalty)
    """
    real = real.detach().requires_grad_(r1_gamma > 0)
    real_logits = discriminator(real)
    d_term = discriminator_gan_loss(real_logits, discriminator(fake.detach()))
    r1 = r1_penalty(real_logits, real, r1_gamma) if r1_gamma > 0 else real_logits.new_zeros(())
    g_term = generator_gan_loss(discriminator(fake))
    return g_term, d_term, r1


def loss_depth(
    rendered: torch.Tensor,
    depth: torch.Tensor,
    valid: torch.Tensor,
    mask: torch.Tensor,
) -> torch.Tensor:
    """Mean squared depth error over pixels that are both object and valid; 0 if there are none."""
    selected = valid.bool() & mask.bool()
    if not selected.any():
        return rendered.new_zeros(())
    return (rendered[selected] - depth[selected].to(rendered.dtype)).pow(2).mean()


def loss_semantic(
    rendered: Optional[torch.Tensor],
    target: Optional[torch.Tensor],
    mask: torch.Tensor,
) -> torch.Tensor:
    """
    Masked L2 between rendered and target feature maps (B, H, W, D), mean over pixels and channels.

    Raises:
        ValidationError: If either feature map is missing
    """
    if rendered is None or target is None:
        raise ValidationError("Semantic supervision is enabled but features are missing", field="semantic")
    m = mask.to(rendered.dtype).unsqueeze(-1)
    return ((rendered - target.to(rendered.dtype)) * m).pow(2).mean()
