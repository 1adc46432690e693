"""Image-space metrics: Frechet distance, mask floaters, embedding coverage and reconstruction error."""

import math
from typing import Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist
from skimage import measure

from libs.exceptions import MetricsError

REGION_THRESHOLD = 0.5


def _covariance(x: np.ndarray) -> np.ndarray:
    return np.atleast_2d(np.cov(x, rowvar=False, ddof=1))


def _trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """Tr[(A B)^{1/2}] through the symmetric form A^{1/2} B A^{1/2}, negative eigenvalues clipped."""
    eigvals, eigvecs = linalg.eigh(sigma_a)
    root_a = (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T
    middle = root_a @ sigma_b @ root_a
    middle = 0.5 * (middle + middle.T)
    return float(np.sqrt(np.clip(linalg.eigvalsh(middle), 0.0, None)).sum())


def frechet_distance(emb_g: np.ndarray, emb_v: np.ndarray) -> float:
    """
    Frechet distance between Gaussians fitted to two embedding sets.

    Args:
        emb_g: (N, D) generated embeddings
        emb_v: (M, D) validation embeddings

    Returns:
        ||mu_g - mu_v||^2 + Tr[S_g + S_v - 2 (S_g S_v)^{1/2}]

    Raises:
        MetricsError: If a set has fewer than two vectors or the widths differ
    """
    emb_g = np.asarray(emb_g, dtype=np.float64)
    emb_v = np.asarray(emb_v, dtype=np.float64)
    if emb_g.ndim != 2 or emb_v.ndim != 2 or emb_g.shape[1] != emb_v.shape[1]:
        raise MetricsError(
            f"Embedding dimensions differ: {emb_g.shape} vs {emb_v.shape}",
            metric="fid",
        )
    if emb_g.shape[0] < 2 or emb_v.shape[0] < 2:
        raise MetricsError("Frechet distance needs at least two embeddings per set", metric="fid")

    mu_g, mu_v = emb_g.mean(axis=0), emb_v.mean(axis=0)
    sigma_g, sigma_v = _covariance(emb_g), _covariance(emb_v)
    diff = mu_g - mu_v
    value = diff @ diff + np.trace(sigma_g) + np.trace(sigma_v) - 2.0 * _trace_sqrt_product(sigma_g, sigma_v)
    return max(float(value), 0.0)


def floater_fraction(alpha: np.ndarray, threshold: float = REGION_THRESHOLD) -> float:
    """Fraction of the region alpha > threshold outside its largest 8-connected component; 1 if empty."""
    region = np.asarray(alpha) > threshold
    area = int(region.sum())
    if area == 0:
        return 1.0
    labels = measure.label(region, connectivity=2)
    largest = int(np.bincount(labels.ravel())[1:].max())
    return 1.0 - largest / area


def mask_fou(alphas: Sequence[np.ndarray], threshold: float = REGION_THRESHOLD) -> float:
    """
    Mean percentage of rendered object pixels not connected to the main region.

    Raises:
        MetricsError: If no images are given
    """
    if len(alphas) == 0:
        raise MetricsError("Mask FOU needs at least one image", metric="mask_fou")
    return 100.0 * float(np.mean([floater_fraction(a, threshold) for a in alphas]))


def cov_mmd(distances: np.ndarray) -> Tuple[float, float]:
    """
    Coverage and minimum matching distance from a (validation x generated) distance matrix.

    Each generated item is matched to its closest validation item (lowest
    index on ties); generated items at infinite distance from everything
    are not matched.

    Returns:
        (fraction of validation items matched at least once, mean over validation of the closest distance)
    """
    distances = np.asarray(distances, dtype=np.float64)
    if distances.ndim != 2 or 0 in distances.shape:
        raise MetricsError("Coverage needs non-empty generated and validation sets", metric="cov")
    finite = np.isfinite(distances).any(axis=0)
    matched = np.argmin(distances[:, finite], axis=0) if finite.any() else np.zeros(0, dtype=int)
    coverage = len(np.unique(matched)) / distances.shape[0]
    mmd = float(distances.min(axis=1).mean())
    return float(coverage), mmd


def cov_mmd_embeddings(emb_g: np.ndarray, emb_v: np.ndarray) -> Tuple[float, float]:
    """COV/MMD with squared Euclidean distance between embeddings."""
    emb_g = np.asarray(emb_g, dtype=np.float64)
    emb_v = np.asarray(emb_v, dtype=np.float64)
    if len(emb_g) == 0 or len(emb_v) == 0:
        raise MetricsError("Coverage needs non-empty generated and validation sets", metric="image_cov")
    return cov_mmd(cdist(emb_v, emb_g, "sqeuclidean"))


def reconstruction_l2(prediction: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Mask-weighted mean squared error over the channels of (H, W, 3) images."""
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    weights = np.asarray(mask, dtype=np.float64)[..., None]
    total = weights.sum() * prediction.shape[-1]
    if total == 0:
        return float("nan")
    return float((weights * (prediction - target) ** 2).sum() / total)


def masked_psnr(prediction: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """PSNR in dB over object pixels of images in [0, 1]; inf for an exact match."""
    mse = reconstruction_l2(prediction, target, mask)
    if math.isnan(mse):
        return mse
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
