"""Base backend classes and the strategy registry for pluggable feature extractors."""

from abc import ABC, abstractmethod
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from libs.exceptions import ConfigurationError

PERCEPTUAL = "perceptual"
EMBEDDING = "embedding"


class BaseBackend(ABC):
    """
    Abstract base class for feature backends.

    Implements the strategy pattern: the trainers and metrics only talk to
    these interfaces, so pretrained networks can be registered as adapters
    without touching the callers.
    """

    name: str = "base"


class PerceptualBackend(BaseBackend):
    """Distance between two image batches in a feature space."""

    @abstractmethod
    def distance(self, prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        """
        Compute a differentiable perceptual distance.

        Args:
            prediction: (B, 3, H, W) images in [0, 1]
            target: (B, 3, H, W) images in [0, 1]

        Returns:
            Scalar tensor, mean over the batch
        """


class EmbeddingBackend(BaseBackend):
    """Fixed-dimension image embedding used by the image metrics."""

    dimension: int = 0

    @abstractmethod
    def embed(self, images: np.ndarray) -> np.ndarray:
        """
        Embed a batch of images.

        Args:
            images: (N, H, W, 3) values in [0, 1]

        Returns:
            (N, dimension) float64 embeddings
        """


BackendFactory = Callable[[], BaseBackend]


class BackendStrategy:
    """
    Registry of backend factories keyed by (kind, name).

    Instances are created lazily on first use and cached.
    """

    def __init__(self):
        """Initialize the backend strategy."""
        self._factories: Dict[Tuple[str, str], BackendFactory] = {}
        self._instances: Dict[Tuple[str, str], BaseBackend] = {}

    def register_backend(self, kind: str, name: str, factory: BackendFactory):
        """
        Register a backend factory.

        Args:
            kind: Backend family, "perceptual" or "embedding"
            name: Unique name within the family
            factory: Zero-argument callable building the backend
        """
        self._factories[(kind, name)] = factory
        self._instances.pop((kind, name), None)

    def get_backend(self, kind: str, name: str) -> BaseBackend:
        """
        Get a registered backend, building it on first use.

        Raises:
            ConfigurationError: If no backend is registered under that name
        """
        key = (kind, name)
        if key not in self._instances:
            factory = self._factories.get(key)
            if factory is None:
                raise ConfigurationError(
                    f"Unknown {kind} backend '{name}', available: {self.list_backends(kind)}",
                    config_key=f"{kind}_backend",
                )
            self._instances[key] = factory()
        return self._instances[key]

    def list_backends(self, kind: Optional[str] = None) -> List[str]:
        """
        List registered backend names.

        Args:
            kind: Restrict to one family

        Returns:
            Sorted backend names
        """
        return sorted(name for k, name in self._factories if kind is None or k == kind)


# Global backend strategy instance
_strategy = BackendStrategy()


def get_backend_strategy() -> BackendStrategy:
    """
    Get the global backend strategy instance.

    Returns:
        Global BackendStrategy instance
    """
    return _strategy


def register_backend(kind: str, name: str, factory: BackendFactory):
    """Register a backend factory with the global strategy."""
    _strategy.register_backend(kind, name, factory)


def get_perceptual_backend(name: str) -> PerceptualBackend:
    """Look up a perceptual backend in the global strategy."""
    import backends.random_conv  # noqa: F401  registers the built-in backends

    return _strategy.get_backend(PERCEPTUAL, name)


def get_embedding_backend(name: str) -> EmbeddingBackend:
    """Look up an embedding backend in the global strategy."""
    import backends.random_conv  # noqa: F401  registers the built-in backends

    return _strategy.get_backend(EMBEDDING, name)
