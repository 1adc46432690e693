"""Unit tests for the feature backend registry."""

import numpy as np
import pytest
import torch

from backends.base import (
    EMBEDDING,
    PERCEPTUAL,
    BackendStrategy,
    EmbeddingBackend,
    get_embedding_backend,
    get_perceptual_backend,
)
from libs.exceptions import ConfigurationError


class ConstantEmbedding(EmbeddingBackend):
    name = "constant"
    dimension = 2

    def embed(self, images: np.ndarray) -> np.ndarray:
        return np.ones((len(images), self.dimension))


@pytest.mark.unit
def test_strategy_builds_lazily_and_caches():
    """Test factories run once, on first lookup."""
    strategy = BackendStrategy()
    calls = []

    def factory():
        calls.append(1)
        return ConstantEmbedding()

    strategy.register_backend(EMBEDDING, "constant", factory)
    assert calls == []

    first = strategy.get_backend(EMBEDDING, "constant")
    second = strategy.get_backend(EMBEDDING, "constant")

    assert first is second
    assert calls == [1]
    assert strategy.list_backends(EMBEDDING) == ["constant"]
    assert strategy.list_backends(PERCEPTUAL) == []


@pytest.mark.unit
def test_unknown_backend():
    """Test an unregistered name is a configuration error."""
    with pytest.raises(ConfigurationError) as exc_info:
        get_embedding_backend("inception")

    assert exc_info.value.config_key == "embedding_backend"


@pytest.mark.unit
def test_random_conv_embedding_is_deterministic():
    """Test embeddings have 64 dimensions and do not depend on global RNG state."""
    images = np.random.default_rng(0).uniform(size=(3, 32, 32, 3))
    backend = get_embedding_backend("random_conv")

    torch.manual_seed(5)
    first = backend.embed(images)
    torch.manual_seed(6)
    second = backend.embed(images)

    assert first.shape == (3, 64)
    assert np.allclose(first, second)
    assert backend.embed(np.zeros((0, 32, 32, 3))).shape == (0, 64)


@pytest.mark.unit
def test_patch_feature_distance():
    """Test the perceptual distance is zero on equal images and differentiable."""
    backend = get_perceptual_backend("patch_feature")
    target = torch.rand(2, 3, 16, 16)
    prediction = torch.rand(2, 3, 16, 16, requires_grad=True)

    assert backend.distance(target, target) == 0.0

    distance = backend.distance(prediction, target)
    distance.backward()

    assert distance > 0.0
    assert prediction.grad is not None


@pytest.mark.unit
def test_disabled_perceptual_backend():
    """Test the disabled backend always returns zero."""
    backend = get_perceptual_backend("disabled")

    assert backend.distance(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)) == 0.0
