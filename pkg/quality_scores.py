"""
QUALITY SCORES - Distribution distances between image sets
==========================================================
FID: || mu_a - mu_b ||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))
KID: unbiased MMD^2 with the cubic polynomial kernel k(x, y) = (x.y / d + 1)^3,
     averaged over blocks of at most KID_BLOCK samples.

Both work on embedder features (any object with embed_tensor/describe, see
semantic_services). Scores are only comparable under one embedder, so callers
stamp embedder.describe() next to every number.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy import linalg

from imaging import Image
from semantic_services import embed_images

logger = logging.getLogger(__name__)

EIGEN_TOL = 1e-8
KID_BLOCK = 1000

ImageSetOrFeatures = Union[Sequence[Image], np.ndarray]


@dataclass
class DistributionStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        if self.sigma.shape != (self.mu.size, self.mu.size):
            raise ValueError(f"covariance shape {self.sigma.shape} does not match mean of size {self.mu.size}")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-10):
            raise ValueError("covariance must be symmetric")

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "DistributionStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValueError("need an N x D feature matrix with N >= 2")
        sigma = np.cov(feats, rowvar=False)
        sigma = np.atleast_2d(0.5 * (sigma + sigma.T))
        return cls(feats.mean(axis=0), sigma, feats.shape[0])


def _features(x: ImageSetOrFeatures, embedder) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(np.float64)
    return embed_images(embedder, list(x))


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = linalg.eigh(mat)
    scale = max(1.0, float(np.abs(vals).max()))
    if vals.min() < -EIGEN_TOL * scale:
        logger.warning("matrix not PSD (min eigenvalue %.3e); clipping", vals.min())
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """Tr((S_a S_b)^(1/2)) through the symmetric form A S_b A with A = S_a^(1/2)."""
    root = _sqrt_psd(sigma_a)
    inner = root @ sigma_b @ root
    vals = np.clip(linalg.eigvalsh(0.5 * (inner + inner.T)), 0.0, None)
    return float(np.sqrt(vals).sum())


def frechet_distance(a: DistributionStats, b: DistributionStats) -> float:
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma)
                  - 2.0 * trace_sqrt_product(a.sigma, b.sigma))
    return max(value, 0.0)


def compute_fid(a: ImageSetOrFeatures, b: ImageSetOrFeatures, embedder=None) -> float:
    """Frechet distance between Gaussian fits of the two feature sets."""
    fa, fb = _features(a, embedder), _features(b, embedder)
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"feature dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    return frechet_distance(DistributionStats.from_features(fa), DistributionStats.from_features(fb))


def _block_bounds(n: int, n_blocks: int) -> np.ndarray:
    base, extra = divmod(n, n_blocks)
    sizes = [base] * (n_blocks - extra) + [base + 1] * extra
    return np.concatenate([[0], np.cumsum(sizes)])


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased MMD^2 of one block under the cubic polynomial kernel.

    With paired blocks (m == n) the cross term also skips i == j, so
    identical blocks score exactly 0.
    """
    d = x.shape[1]
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ValueError("each block needs at least two samples")
    k_xx = (x @ x.T / d + 1.0) ** 3
    k_yy = (y @ y.T / d + 1.0) ** 3
    k_xy = (x @ y.T / d + 1.0) ** 3
    if m == n:
        cross = (k_xy.sum() - np.trace(k_xy)) / (m * (m - 1))
    else:
        cross = k_xy.mean()
    return float((k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
                 + (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
                 - 2.0 * cross)


def compute_kid(a: ImageSetOrFeatures, b: ImageSetOrFeatures, embedder=None,
                max_block_size: int = KID_BLOCK) -> float:
    """Mean of the per-block unbiased MMD^2 estimates."""
    fa, fb = _features(a, embedder), _features(b, embedder)
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"feature dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    n_blocks = int(np.ceil(max(len(fa), len(fb)) / max_block_size))
    ia, ib = _block_bounds(len(fa), n_blocks), _block_bounds(len(fb), n_blocks)
    estimates = [mmd2_unbiased(fa[ia[i]:ia[i + 1]], fb[ib[i]:ib[i + 1]]) for i in range(n_blocks)]
    return float(np.mean(estimates))
