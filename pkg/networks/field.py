"""Radiance fields queried by the volume renderer: the tri-plane field and analytic oracle fields."""

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F
from torch import nn

from libs.exceptions import ValidationError

# Coordinate pairs sampled by each plane, in plane order xy, xz, yz
PLANE_AXES = ((0, 1), (0, 2), (1, 2))


@dataclass
class FieldOutput:
    """Density (N,), color (N, 3) and optional semantic features (N, D) at N points."""

    sigma: torch.Tensor
    rgb: torch.Tensor
    semantic: Optional[torch.Tensor] = None


class FieldDecoder(nn.Module):
    """Shallow MLP from summed plane features to density, color and semantic features."""

    def __init__(self, in_dim: int, hidden_dim: int = 64, semantic_dim: int = 0):
        super().__init__()
        self.semantic_dim = semantic_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.Softplus(),
            nn.Linear(hidden_dim, 1 + 3 + semantic_dim),
        )

    def forward(self, features: torch.Tensor) -> FieldOutput:
        raw = self.net(features)
        semantic = raw[..., 4:] if self.semantic_dim else None
        return FieldOutput(sigma=F.softplus(raw[..., 0]), rgb=torch.sigmoid(raw[..., 1:4]), semantic=semantic)


def sample_planes(planes: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """
    Bilinearly sample three feature planes and sum the results.

    Args:
        planes: (3, C, H, W), plane order xy, xz, yz; W indexes the first axis of the pair
        coords: (N, 3) normalized coordinates, [-1, 1] spans the plane; outside clamps to the border

    Returns:
        (N, C) features
    """
    grid = torch.stack([coords[:, list(axes)] for axes in PLANE_AXES], dim=0).unsqueeze(1)
    sampled = F.grid_sample(planes, grid.to(planes.dtype), mode="bilinear", padding_mode="border", align_corners=False)
    return sampled.sum(dim=0).squeeze(1).transpose(0, 1)


def query_field(
    planes: torch.Tensor,
    decoder: FieldDecoder,
    points: torch.Tensor,
    scale: Union[Sequence[float], torch.Tensor],
) -> FieldOutput:
    """
    Query the tri-plane field at object-frame points.

    Points are first divided by the box scale, so the planes span the box
    [-scale/2, scale/2] exactly.

    Args:
        planes: (3, C, H, W) feature planes
        decoder: Field MLP
        points: (N, 3) points in the object frame
        scale: Box extents (3,)

    Returns:
        Field values at the points

    Raises:
        ValidationError: If any scale component is not positive
    """
    scale = torch.as_tensor(scale, dtype=points.dtype)
    if scale.shape != (3,) or not torch.all(scale > 0):
        raise ValidationError("Field scale must have three positive components", field="scale", value=scale.tolist())
    normalized = points / scale
    return decoder(sample_planes(planes, 2.0 * normalized))


class TriPlaneField:
    """Decoded asset: one set of planes bound to its field MLP and box extents."""

    def __init__(self, planes: torch.Tensor, decoder: FieldDecoder, extent: Union[Sequence[float], torch.Tensor]):
        self.planes = planes
        self.decoder = decoder
        self.extent = torch.as_tensor(extent, dtype=planes.dtype)

    @property
    def semantic_dim(self) -> int:
        return self.decoder.semantic_dim

    def __call__(self, points: torch.Tensor) -> FieldOutput:
        return query_field(self.planes, self.decoder, points, self.extent)


class ConstantField:
    """Same density and color everywhere."""

    semantic_dim = 0

    def __init__(self, sigma: float, rgb: Sequence[float] = (0.5, 0.5, 0.5)):
        self.sigma = sigma
        self.rgb = tuple(rgb)

    def __call__(self, points: torch.Tensor) -> FieldOutput:
        n = points.shape[0]
        sigma = torch.full((n,), float(self.sigma), dtype=points.dtype)
        rgb = torch.tensor(self.rgb, dtype=points.dtype).expand(n, 3)
        return FieldOutput(sigma=sigma, rgb=rgb)


class SphereField:
    """
    Sphere of radius ``radius`` around ``center``.

    The "indicator" profile is ``density`` inside and 0 outside. The "ramp"
    profile is ``level * (2 - d / radius)`` clamped at 0, whose ``level``
    isosurface is the sphere itself.
    """

    semantic_dim = 0

    def __init__(
        self,
        radius: float,
        center: Sequence[float] = (0.0, 0.0, 0.0),
        density: float = 20.0,
        profile: str = "indicator",
        level: float = 10.0,
        rgb: Sequence[float] = (0.8, 0.2, 0.2),
    ):
        if profile not in ("indicator", "ramp"):
            raise ValidationError(f"Unknown sphere profile '{profile}'", field="profile", value=profile)
        self.radius = radius
        self.center = tuple(center)
        self.density = density
        self.profile = profile
        self.level = level
        self.rgb = tuple(rgb)

    def __call__(self, points: torch.Tensor) -> FieldOutput:
        distance = (points - torch.tensor(self.center, dtype=points.dtype)).norm(dim=-1)
        if self.profile == "indicator":
            sigma = torch.where(distance < self.radius, self.density, 0.0).to(points.dtype)
        else:
            sigma = torch.clamp(self.level * (2.0 - distance / self.radius), min=0.0)
        rgb = torch.tensor(self.rgb, dtype=points.dtype).expand(points.shape[0], 3)
        return FieldOutput(sigma=sigma, rgb=rgb)
