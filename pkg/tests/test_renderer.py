"""Unit tests for radiance fields and the volume renderer."""

import math

import pytest
import torch

from libs.exceptions import RenderError, ValidationError
from libs.geometry import Camera
from networks.field import (
    ConstantField,
    FieldDecoder,
    FieldOutput,
    SphereField,
    TriPlaneField,
    query_field,
    sample_planes,
)
from networks.renderer import (
    composite_weights,
    ray_box_intersection,
    render,
    render_rays,
    sample_deltas,
    sample_pdf,
    stratified_samples,
)

UNIT_BOX = (1.0, 1.0, 1.0)


def axis_rays(n: int = 1):
    """Rays entering the unit box through its -x face, spread along y."""
    offsets = torch.linspace(-0.3, 0.3, n) if n > 1 else torch.zeros(1)
    origins = torch.stack([torch.full((n,), -2.0), offsets, torch.zeros(n)], dim=1)
    directions = torch.tensor([[1.0, 0.0, 0.0]]).expand(n, 3).clone()
    return origins, directions


class CountingField:
    """Wraps a field and records how many points it was asked for."""

    semantic_dim = 0

    def __init__(self, field):
        self.field = field
        self.queried = 0

    def __call__(self, points: torch.Tensor) -> FieldOutput:
        self.queried += points.shape[0]
        return self.field(points)


@pytest.mark.unit
def test_ray_box_intersection(float64):
    """Test slab intersection distances and misses."""
    origins = torch.tensor([[-2.0, 0.0, 0.0], [-2.0, 2.0, 0.0]])
    directions = torch.tensor([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])

    t_near, t_far, hit = ray_box_intersection(origins, directions, torch.tensor(UNIT_BOX))

    assert hit.tolist() == [True, False]
    assert torch.isclose(t_near[0], torch.tensor(1.5))
    assert torch.isclose(t_far[0], torch.tensor(2.5))


@pytest.mark.unit
def test_stratified_samples_midpoints_without_generator(float64):
    """Test deterministic samples sit at bin midpoints."""
    t = stratified_samples(torch.tensor([0.0]), torch.tensor([1.0]), 4)

    assert torch.allclose(t, torch.tensor([[0.125, 0.375, 0.625, 0.875]]))


@pytest.mark.unit
def test_stratified_samples_stay_in_bins(float64):
    """Test jittered samples stay inside their own bins."""
    t = stratified_samples(torch.zeros(100), torch.ones(100), 8, torch.Generator().manual_seed(0))
    bins = torch.floor(t * 8)

    assert torch.equal(bins, torch.arange(8.0).expand(100, 8))


@pytest.mark.unit
def test_sample_deltas_tile_the_segment(float64):
    """Test interval lengths sum to the in-box segment and the last one reaches the exit."""
    t_near, t_far = torch.tensor([1.5]), torch.tensor([2.5])
    t = stratified_samples(t_near, t_far, 5, torch.Generator().manual_seed(3))

    deltas = sample_deltas(t, t_near, t_far)

    assert torch.isclose(deltas.sum(), torch.tensor(1.0))
    assert torch.isclose(deltas[0, -1], t_far[0] - t[0, -1])
    assert torch.all(deltas > 0)


@pytest.mark.unit
def test_composite_weights_bounded(float64):
    """Test weights are nonnegative and sum to at most one."""
    sigma = torch.rand(50, 16, generator=torch.Generator().manual_seed(1)) * 10
    deltas = torch.full((50, 16), 0.05)

    weights = composite_weights(sigma, deltas)

    assert torch.all(weights >= 0)
    assert torch.all(weights.sum(dim=1) <= 1.0 + 1e-12)


@pytest.mark.unit
def test_sample_pdf_follows_weights(float64):
    """Test importance samples land in the bin holding all the weight."""
    bins = torch.tensor([[0.0, 1.0, 2.0, 3.0]])
    weights = torch.tensor([[0.0, 1.0, 0.0]]) + 1e-8

    samples = sample_pdf(bins, weights, 16)

    assert torch.all((samples >= 1.0 - 1e-4) & (samples <= 2.0 + 1e-4))


@pytest.mark.unit
@pytest.mark.parametrize("num_uniform", [16, 32, 64])
def test_constant_density_alpha(float64, num_uniform):
    """Test alpha of a constant field matches 1 - exp(-sigma L)."""
    sigma = 1.5
    origins, directions = axis_rays()

    out = render_rays(ConstantField(sigma), origins, directions, UNIT_BOX, num_uniform)

    assert abs(float(out.alpha[0]) - (1.0 - math.exp(-sigma * 1.0))) < 1e-3


@pytest.mark.unit
def test_opaque_field_front_face(float64):
    """Test a very dense field renders its color at the entry depth."""
    origins, directions = axis_rays(3)
    color = (0.2, 0.4, 0.6)

    out = render_rays(ConstantField(1e4, color), origins, directions, UNIT_BOX, 32)

    assert torch.allclose(out.rgb, torch.tensor(color).expand(3, 3), atol=1e-6)
    assert torch.allclose(out.alpha, torch.ones(3))
    assert torch.all((out.depth - 1.5).abs() <= 1.0 / 32)


@pytest.mark.unit
def test_missing_rays_never_query_field(float64):
    """Test rays missing the box are zero and cost no field queries."""
    field = CountingField(ConstantField(1.0))
    origins = torch.tensor([[-2.0, 2.0, 0.0], [-2.0, 0.0, 0.0]])
    directions = torch.tensor([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])

    out = render_rays(field, origins, directions, UNIT_BOX, 8, 4)

    assert out.alpha[0] == 0.0
    assert torch.all(out.weights[0] == 0.0)
    assert out.alpha[1] > 0.0
    assert field.queried == 8 + 12


@pytest.mark.unit
def test_degenerate_direction(float64):
    """Test a zero direction is rejected with its index."""
    origins, _ = axis_rays(2)
    directions = torch.tensor([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])

    with pytest.raises(RenderError) as exc_info:
        render_rays(ConstantField(1.0), origins, directions, UNIT_BOX, 4)

    assert exc_info.value.ray_index == 1


@pytest.mark.unit
def test_chunking_does_not_change_result(float64):
    """Test rendering in chunks matches one pass."""
    camera = Camera.orbit(30.0, 20.0, 2.0, resolution=8)
    origins, directions = (torch.from_numpy(a) for a in camera.rays())
    field = SphereField(0.3)

    whole = render_rays(field, origins, directions, UNIT_BOX, 16, 8)
    chunked = render_rays(field, origins, directions, UNIT_BOX, 16, 8, chunk_size=5)

    assert torch.allclose(whole.rgb, chunked.rgb)
    assert torch.allclose(whole.depth, chunked.depth)


@pytest.mark.unit
def test_render_deterministic_and_seeded(float64):
    """Test renders are deterministic without a generator and reproducible with one."""
    camera = Camera.orbit(0.0, 10.0, 2.0, resolution=8)
    field = SphereField(0.35)

    first = render(field, camera, UNIT_BOX, 8, 4)
    second = render(field, camera, UNIT_BOX, 8, 4)
    seeded_a = render(field, camera, UNIT_BOX, 8, 4, generator=torch.Generator().manual_seed(1))
    seeded_b = render(field, camera, UNIT_BOX, 8, 4, generator=torch.Generator().manual_seed(1))

    assert torch.equal(first.alpha, second.alpha)
    assert torch.equal(seeded_a.alpha, seeded_b.alpha)
    assert first.rgb.shape == (8, 8, 3)


@pytest.mark.unit
def test_render_resolution_override(float64):
    """Test the output follows the requested resolution."""
    camera = Camera.orbit(0.0, 10.0, 2.0, resolution=32)

    out = render(SphereField(0.3), camera, UNIT_BOX, 8, resolution=4)

    assert out.alpha.shape == (4, 4)
    assert out.semantic is None


@pytest.mark.unit
def test_constant_planes_give_constant_field():
    """Test constant planes decode to the same values everywhere."""
    planes = torch.full((3, 4, 8, 8), 0.7)
    coords = torch.rand(20, 3) * 2 - 1

    features = sample_planes(planes, coords)

    assert torch.allclose(features, torch.full((20, 4), 2.1))


@pytest.mark.unit
def test_plane_axes_orientation():
    """Test the xy plane's width axis follows x and ignores z."""
    planes = torch.zeros(3, 1, 8, 8)
    planes[0, 0] = torch.linspace(-1.0, 1.0, 8).expand(8, 8)
    along_x = torch.tensor([[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]])
    along_z = torch.tensor([[0.0, 0.0, -0.5], [0.0, 0.0, 0.5]])

    fx = sample_planes(planes, along_x)
    fz = sample_planes(planes, along_z)

    assert fx[1, 0] > fx[0, 0]
    assert torch.isclose(fz[0, 0], fz[1, 0])


@pytest.mark.unit
def test_triplane_field_outputs():
    """Test decoded densities are nonnegative and colors lie in (0, 1)."""
    torch.manual_seed(0)
    field = TriPlaneField(torch.randn(3, 4, 8, 8), FieldDecoder(4, 16, semantic_dim=2), (4.0, 2.0, 1.5))

    out = field(torch.rand(10, 3) - 0.5)

    assert torch.all(out.sigma >= 0)
    assert torch.all((out.rgb > 0) & (out.rgb < 1))
    assert out.semantic.shape == (10, 2)


@pytest.mark.unit
def test_triplane_field_rejects_bad_scale():
    """Test a non-positive box extent is rejected."""
    field = TriPlaneField(torch.zeros(3, 4, 8, 8), FieldDecoder(4), (1.0, 0.0, 1.0))

    with pytest.raises(ValidationError):
        field(torch.zeros(1, 3))


@pytest.mark.unit
def test_scaled_box_identity():
    """Test querying a scaled box equals querying the unit box at rescaled points."""
    torch.manual_seed(0)
    decoder = FieldDecoder(4, 8)

    for _ in range(100):
        planes = torch.randn(3, 4, 8, 8)
        points = torch.randn(16, 3)
        scale = torch.rand(3) * 5.5 + 0.5

        scaled = query_field(planes, decoder, points, scale)
        unit = query_field(planes, decoder, points / scale, torch.ones(3))

        assert torch.equal(scaled.sigma, unit.sigma)
        assert torch.equal(scaled.rgb, unit.rgb)


@pytest.mark.unit
def test_render_gradient_matches_finite_difference(float64, finite_difference):
    """Test pixel gradients with respect to plane cells match central differences."""
    torch.manual_seed(0)
    decoder = FieldDecoder(2, 8)
    planes = torch.randn(3, 2, 4, 4)
    camera = Camera.orbit(30.0, 20.0, 3.0, resolution=4)

    def pixel_loss(p: torch.Tensor) -> torch.Tensor:
        out = render(TriPlaneField(p, decoder, UNIT_BOX), camera, UNIT_BOX, 8)
        return out.rgb.sum() + out.alpha.sum()

    leaf = planes.clone().requires_grad_(True)
    pixel_loss(leaf).backward()
    with torch.no_grad():
        numeric = finite_difference(pixel_loss, planes)

    assert leaf.grad.abs().max() > 0
    assert torch.allclose(leaf.grad, numeric, rtol=1e-4, atol=1e-8)
