"""Unit tests for the encoder, decoder and discriminator networks."""

import pytest
import torch

from libs.exceptions import ConfigurationError, ValidationError
from libs.schema import get_preset
from networks.decoder import PlaneGenerator, TriPlaneDecoder
from networks.discriminator import Discriminator
from networks.encoder import PatchEmbedding, TriPlaneEncoder, premask_images


@pytest.mark.unit
def test_patch_embedding_appends_cls():
    """Test patch tokens are followed by one CLS token."""
    embed = PatchEmbedding(image_resolution=32, patch_size=8, embed_dim=16)

    tokens = embed(torch.rand(2, 3, 32, 32))

    assert tokens.shape == (2, 16 + 1, 16)


@pytest.mark.unit
def test_patch_embedding_rejects_indivisible_images():
    """Test images not divisible into patches are rejected."""
    with pytest.raises(ValidationError):
        PatchEmbedding(image_resolution=30, patch_size=8, embed_dim=16)

    embed = PatchEmbedding(image_resolution=32, patch_size=8, embed_dim=16)
    with pytest.raises(ValidationError):
        embed(torch.rand(1, 3, 30, 32))


@pytest.mark.unit
def test_encoder_output_shape_and_range(tiny_config):
    """Test the encoder emits one bounded embedding per tri-plane cell."""
    torch.manual_seed(0)
    encoder = TriPlaneEncoder(tiny_config)

    embeddings = encoder(torch.rand(3, 3, 32, 32))

    assert embeddings.shape == (3, 2, 2, 3, 8)
    assert torch.all(embeddings.abs() < 1.0)


@pytest.mark.unit
def test_encoder_rejects_wrong_resolution(tiny_config):
    """Test the encoder refuses images of another size."""
    encoder = TriPlaneEncoder(tiny_config)

    with pytest.raises(ValidationError):
        encoder(torch.rand(1, 3, 16, 16))


@pytest.mark.unit
def test_encoder_is_batch_independent(tiny_config):
    """Test an image encodes the same alone or in a batch."""
    torch.manual_seed(0)
    encoder = TriPlaneEncoder(tiny_config).eval()
    images = torch.rand(2, 3, 32, 32)

    with torch.no_grad():
        batched = encoder(images)
        single = encoder(images[1:])

    assert torch.allclose(batched[1:], single, atol=1e-5)


@pytest.mark.unit
def test_premask_images_whitens_background():
    """Test pixels outside the mask become white and the rest are unchanged."""
    images = torch.full((1, 3, 2, 2), 0.25)
    masks = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]])

    out = premask_images(images, masks)

    assert torch.all(out[0, :, 0, 0] == 0.25)
    assert torch.all(out[0, :, 0, 1] == 1.0)
    assert torch.all(out[0, :, 1, 1] == 0.25)


@pytest.mark.unit
def test_decoder_plane_shape(tiny_config):
    """Test quantized latents decode to three planes at plane resolution."""
    torch.manual_seed(0)
    decoder = TriPlaneDecoder(tiny_config)

    planes = decoder(torch.randn(2, 2, 2, 3, 8))

    assert planes.shape == (2, 3, 4, 8, 8)
    assert torch.isfinite(planes).all()


@pytest.mark.unit
@pytest.mark.parametrize(
    "preset, widths",
    [("desk", [128, 64, 32]), ("paper", [512, 512, 256, 128])],
)
def test_plane_generator_block_widths(preset, widths):
    """Test the stem keeps the latent resolution and one block follows per doubling."""
    generator = PlaneGenerator(get_preset(preset))

    assert generator.stem.bias.shape == (widths[0],)
    assert [block.conv2.bias.shape[0] for block in generator.blocks] == widths


@pytest.mark.unit
def test_decoder_field_queries(tiny_config):
    """Test a decoded asset can be queried as a radiance field."""
    torch.manual_seed(0)
    decoder = TriPlaneDecoder(tiny_config)
    planes = decoder(torch.randn(1, 2, 2, 3, 8))[0]

    out = decoder.field(planes, (4.0, 2.0, 1.5))(torch.zeros(5, 3))

    assert out.sigma.shape == (5,)
    assert out.rgb.shape == (5, 3)


@pytest.mark.unit
def test_decoder_gradients_reach_latents(tiny_config):
    """Test the decoder is differentiable with respect to its input vectors."""
    torch.manual_seed(0)
    decoder = TriPlaneDecoder(tiny_config)
    vectors = torch.randn(1, 2, 2, 3, 8, requires_grad=True)

    decoder(vectors).square().mean().backward()

    assert vectors.grad is not None
    assert vectors.grad.abs().sum() > 0


@pytest.mark.unit
def test_discriminator_logits():
    """Test the discriminator returns one logit per image."""
    torch.manual_seed(0)
    discriminator = Discriminator(16, channels=(8, 16))

    logits = discriminator(torch.rand(4, 3, 16, 16))

    assert logits.shape == (4,)


@pytest.mark.unit
def test_discriminator_too_deep():
    """Test a discriminator deeper than the image allows is a configuration error."""
    with pytest.raises(ConfigurationError):
        Discriminator(4, channels=(8, 16, 32, 64))


@pytest.mark.unit
def test_encoder_gradient_matches_finite_difference(tiny_config, float64, finite_difference):
    """Test the gradient of an embedding probe along a random image direction matches central differences."""
    torch.manual_seed(0)
    encoder = TriPlaneEncoder(tiny_config).eval()
    image = torch.rand(1, 3, 32, 32)
    direction = torch.randn_like(image)
    probe = torch.randn(1, 2, 2, 3, 8)

    def objective(t: torch.Tensor) -> torch.Tensor:
        return (encoder(image + t * direction) * probe).sum()

    t = torch.zeros(1, requires_grad=True)
    objective(t).backward()
    with torch.no_grad():
        numeric = finite_difference(objective, torch.zeros(1))

    assert abs(t.grad.item() - numeric.item()) <= 1e-4 * abs(numeric.item())
