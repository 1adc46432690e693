"""Volume rendering of radiance fields inside an object-centered box."""

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import torch

from libs.exceptions import RenderError
from libs.geometry import Camera
from networks.field import FieldOutput

Field = Callable[[torch.Tensor], FieldOutput]

# Added to the coarse weights before importance sampling
PDF_EPS = 1e-5


@dataclass
class RayOutput:
    """Per-ray composites; weights and t are (P, S) and zero for rays that miss the box."""

    rgb: torch.Tensor
    alpha: torch.Tensor
    depth: torch.Tensor
    weights: torch.Tensor
    t_values: torch.Tensor
    semantic: Optional[torch.Tensor] = None


def on_white(rgb: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Premultiplied colors (..., 3) with coverage (...) composited over a white background."""
    return rgb + (1.0 - alpha)[..., None]


@dataclass
class RenderOutput:
    """Rendered image: rgb (..., R, R, 3), alpha (..., R, R), depth (..., R, R), semantic (..., R, R, D)."""

    rgb: torch.Tensor
    alpha: torch.Tensor
    depth: torch.Tensor
    semantic: Optional[torch.Tensor] = None


def ray_box_intersection(
    origins: torch.Tensor,
    directions: torch.Tensor,
    extent: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Slab test against the box [-extent/2, extent/2].

    Returns:
        t_near (P,), t_far (P,) and a bool hit mask (P,)
    """
    half = extent / 2.0
    safe = torch.where(directions.abs() < 1e-12, torch.full_like(directions, 1e-12), directions)
    t1 = (-half - origins) / safe
    t2 = (half - origins) / safe
    t_near = torch.minimum(t1, t2).amax(dim=-1).clamp(min=0.0)
    t_far = torch.maximum(t1, t2).amin(dim=-1)
    return t_near, t_far, t_far > t_near


def stratified_samples(
    t_near: torch.Tensor,
    t_far: torch.Tensor,
    count: int,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    One sample per equal-length bin of [t_near, t_far].

    Positions inside the bins are jittered with ``generator``; without one
    every sample sits at its bin midpoint.
    """
    steps = torch.arange(count, dtype=t_near.dtype)
    if generator is None:
        offsets = torch.full((t_near.shape[0], count), 0.5, dtype=t_near.dtype)
    else:
        offsets = torch.rand((t_near.shape[0], count), generator=generator, dtype=t_near.dtype)
    length = (t_far - t_near)[:, None]
    return t_near[:, None] + (steps + offsets) * length / count


def sample_pdf(
    bins: torch.Tensor,
    weights: torch.Tensor,
    count: int,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    Inverse-transform sampling of a piecewise-constant PDF.

    Args:
        bins: (M, n + 1) bin edges
        weights: (M, n) nonnegative, not all zero per row
        count: Samples per row
        generator: Source of uniforms; None uses evenly spaced quantiles

    Returns:
        (M, count) sample positions
    """
    pdf = weights / weights.sum(dim=-1, keepdim=True)
    cdf = torch.cumsum(pdf, dim=-1)
    cdf = torch.cat([torch.zeros_like(cdf[:, :1]), cdf], dim=-1)

    if generator is None:
        u = ((torch.arange(count, dtype=bins.dtype) + 0.5) / count).expand(bins.shape[0], count)
    else:
        u = torch.rand((bins.shape[0], count), generator=generator, dtype=bins.dtype)
    u = u.contiguous()

    last = cdf.shape[-1] - 1
    indices = torch.searchsorted(cdf.contiguous(), u, right=True)
    below = (indices - 1).clamp(0, last)
    above = indices.clamp(0, last)
    cdf_below, cdf_above = cdf.gather(-1, below), cdf.gather(-1, above)
    bins_below, bins_above = bins.gather(-1, below), bins.gather(-1, above)

    denom = cdf_above - cdf_below
    denom = torch.where(denom < 1e-5, torch.ones_like(denom), denom)
    return bins_below + (u - cdf_below) / denom * (bins_above - bins_below)


def sample_deltas(t_values: torch.Tensor, t_near: torch.Tensor, t_far: torch.Tensor) -> torch.Tensor:
    """
    Interval lengths of sorted samples, tiling [t_near, t_far] exactly.

    Each sample runs to the next one and the last to the box exit; the first
    also covers the gap from the box entry.
    """
    ends = torch.cat([t_values[:, 1:], t_far[:, None]], dim=-1)
    starts = torch.cat([t_near[:, None], t_values[:, 1:]], dim=-1)
    return ends - starts


def composite_weights(sigma: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """w_i = T_i (1 - exp(-sigma_i delta_i)) with T_i = exp(-sum_{j<i} sigma_j delta_j)."""
    optical = sigma * deltas
    accumulated = torch.cumsum(optical, dim=-1) - optical
    return torch.exp(-accumulated) * (1.0 - torch.exp(-optical))


def _query(field: Field, origins: torch.Tensor, directions: torch.Tensor, t_values: torch.Tensor) -> FieldOutput:
    points = origins[:, None, :] + t_values[..., None] * directions[:, None, :]
    out = field(points.reshape(-1, 3))
    m, s = t_values.shape
    semantic = out.semantic.reshape(m, s, -1) if out.semantic is not None else None
    return FieldOutput(sigma=out.sigma.reshape(m, s), rgb=out.rgb.reshape(m, s, 3), semantic=semantic)


def _render_segment(
    field: Field,
    origins: torch.Tensor,
    directions: torch.Tensor,
    t_near: torch.Tensor,
    t_far: torch.Tensor,
    num_uniform: int,
    num_importance: int,
    generator: Optional[torch.Generator],
) -> Tuple[torch.Tensor, ...]:
    t_values = stratified_samples(t_near, t_far, num_uniform, generator)
    out = _query(field, origins, directions, t_values)
    weights = composite_weights(out.sigma, sample_deltas(t_values, t_near, t_far))

    if num_importance > 0:
        steps = torch.arange(num_uniform + 1, dtype=t_near.dtype)
        bins = t_near[:, None] + steps * (t_far - t_near)[:, None] / num_uniform
        extra = sample_pdf(bins, weights.detach() + PDF_EPS, num_importance, generator)
        t_values, _ = torch.sort(torch.cat([t_values, extra.detach()], dim=-1), dim=-1)
        out = _query(field, origins, directions, t_values)
        weights = composite_weights(out.sigma, sample_deltas(t_values, t_near, t_far))

    rgb = (weights[..., None] * out.rgb).sum(dim=1)
    alpha = weights.sum(dim=1)
    depth = (weights * t_values).sum(dim=1)
    semantic = (weights[..., None] * out.semantic).sum(dim=1) if out.semantic is not None else None
    return rgb, alpha, depth, weights, t_values, semantic


def render_rays(
    field: Field,
    origins: torch.Tensor,
    directions: torch.Tensor,
    extent: Union[Sequence[float], torch.Tensor],
    num_uniform: int,
    num_importance: int = 0,
    generator: Optional[torch.Generator] = None,
    semantic_dim: int = 0,
    chunk_size: Optional[int] = None,
) -> RayOutput:
    """
    Composite ``field`` along each ray inside the box.

    Rays missing the box get zero outputs and never query the field. Rays
    are processed independently, so chunking does not change the result.

    Args:
        field: Callable mapping (N, 3) points to FieldOutput
        origins: (P, 3) ray origins
        directions: (P, 3) unit directions
        extent: Box extents (3,)
        num_uniform: Stratified samples per ray
        num_importance: Extra samples drawn from the coarse weights
        generator: Jitter source; None renders deterministically
        semantic_dim: Channels of the field's semantic output, 0 if none
        chunk_size: Optional number of hit rays per field batch

    Returns:
        Per-ray outputs

    Raises:
        RenderError: If a direction is zero or not finite
    """
    norms = directions.norm(dim=-1)
    bad = ~torch.isfinite(norms) | (norms == 0)
    if bad.any():
        raise RenderError("Degenerate ray direction", ray_index=int(bad.nonzero()[0, 0]))

    dtype = origins.dtype
    extent = torch.as_tensor(extent, dtype=dtype)
    num_rays = origins.shape[0]
    num_samples = num_uniform + num_importance

    t_near, t_far, hit = ray_box_intersection(origins, directions, extent)
    hit_index = hit.nonzero().squeeze(-1)

    rgb = torch.zeros(num_rays, 3, dtype=dtype)
    alpha = torch.zeros(num_rays, dtype=dtype)
    depth = torch.zeros(num_rays, dtype=dtype)
    weights = torch.zeros(num_rays, num_samples, dtype=dtype)
    t_values = torch.zeros(num_rays, num_samples, dtype=dtype)
    semantic = torch.zeros(num_rays, semantic_dim, dtype=dtype) if semantic_dim else None

    if hit_index.numel() == 0:
        return RayOutput(rgb, alpha, depth, weights, t_values, semantic)

    chunk_size = chunk_size or hit_index.numel()
    parts: List[Tuple[torch.Tensor, ...]] = []
    for start in range(0, hit_index.numel(), chunk_size):
        idx = hit_index[start:start + chunk_size]
        parts.append(
            _render_segment(
                field, origins[idx], directions[idx], t_near[idx], t_far[idx],
                num_uniform, num_importance, generator,
            )
        )
    seg_rgb, seg_alpha, seg_depth, seg_weights, seg_t, seg_sem = (
        torch.cat(items, dim=0) if items[0] is not None else None for items in zip(*parts)
    )

    rgb = rgb.index_copy(0, hit_index, seg_rgb)
    alpha = alpha.index_copy(0, hit_index, seg_alpha)
    depth = depth.index_copy(0, hit_index, seg_depth)
    weights = weights.index_copy(0, hit_index, seg_weights)
    t_values = t_values.index_copy(0, hit_index, seg_t)
    if semantic is not None and seg_sem is not None:
        semantic = semantic.index_copy(0, hit_index, seg_sem)
    return RayOutput(rgb, alpha, depth, weights, t_values, semantic)


def render(
    field: Field,
    camera: Camera,
    extent: Union[Sequence[float], torch.Tensor],
    num_uniform: int,
    num_importance: int = 0,
    resolution: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
    dtype: Optional[torch.dtype] = None,
    chunk_size: Optional[int] = None,
) -> RenderOutput:
    """
    Render one asset through ``camera``.

    Args:
        field: Radiance field of the asset
        camera: Pinhole camera in the object frame
        extent: Box extents the field is defined in
        num_uniform: Stratified samples per ray
        num_importance: Importance samples per ray
        resolution: Output side in pixels; the camera intrinsics are rescaled to it
        generator: Jitter source for training; None renders deterministically
        dtype: Floating dtype of the rays, defaults to torch's default dtype
        chunk_size: Optional number of rays per field batch

    Returns:
        Rendered image channels, (R, R, ...)
    """
    if resolution is not None and (camera.width != resolution or camera.height != resolution):
        camera = camera.resized(resolution)
    dtype = dtype or torch.get_default_dtype()
    origins, directions = camera.rays()
    rays = render_rays(
        field,
        torch.from_numpy(origins).to(dtype),
        torch.from_numpy(directions).to(dtype),
        extent,
        num_uniform,
        num_importance,
        generator=generator,
        semantic_dim=getattr(field, "semantic_dim", 0),
        chunk_size=chunk_size,
    )
    h, w = camera.height, camera.width
    semantic = rays.semantic.reshape(h, w, -1) if rays.semantic is not None else None
    return RenderOutput(
        rgb=rays.rgb.reshape(h, w, 3),
        alpha=rays.alpha.reshape(h, w),
        depth=rays.depth.reshape(h, w),
        semantic=semantic,
    )


def render_batch(
    fields: Sequence[Field],
    cameras: Sequence[Camera],
    extents: Sequence[Union[Sequence[float], torch.Tensor]],
    num_uniform: int,
    num_importance: int = 0,
    resolution: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
    dtype: Optional[torch.dtype] = None,
) -> RenderOutput:
    """Render several assets, one camera each, stacked along a leading batch axis."""
    outputs = [
        render(f, c, e, num_uniform, num_importance, resolution, generator, dtype)
        for f, c, e in zip(fields, cameras, extents)
    ]
    semantic = None
    if all(o.semantic is not None for o in outputs):
        semantic = torch.stack([o.semantic for o in outputs])
    return RenderOutput(
        rgb=torch.stack([o.rgb for o in outputs]),
        alpha=torch.stack([o.alpha for o in outputs]),
        depth=torch.stack([o.depth for o in outputs]),
        semantic=semantic,
    )
