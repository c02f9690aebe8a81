"""Evaluation metrics: SSIM (paired) and a Fréchet distance over the
artifact's own encoder embeddings (unpaired).

The Fréchet distance here is computed on class-token embeddings of OUR
fine-tuned ViT, not Inception features; it is plumbing with the same
formula, not the published FID, and reports say so.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConfigurationError

LUMA = np.array([0.299, 0.587, 0.114])


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-0.5 * (coords / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x: np.ndarray, y: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM between two same-shape images in [0, 1].

    Color inputs are converted to luminance first; local statistics use a
    Gaussian window over all fully-contained window positions.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ConfigurationError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 3:
        x = x @ LUMA
        y = y @ LUMA
    if window > min(x.shape):
        raise ConfigurationError(
            f"window {window} larger than image {x.shape}")
    w = _gaussian_window(window, sigma)
    xw = np.lib.stride_tricks.sliding_window_view(x, (window, window))
    yw = np.lib.stride_tricks.sliding_window_view(y, (window, window))
    mu_x = np.einsum("ijab,ab->ij", xw, w)
    mu_y = np.einsum("ijab,ab->ij", yw, w)
    xx = np.einsum("ijab,ab->ij", xw * xw, w)
    yy = np.einsum("ijab,ab->ij", yw * yw, w)
    xy = np.einsum("ijab,ab->ij", xw * yw, w)
    var_x = xx - mu_x ** 2
    var_y = yy - mu_y ** 2
    cov = xy - mu_x * mu_y
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


@dataclass
class GaussianStats:
    """Sample mean/covariance of an embedding set."""

    mean: np.ndarray
    cov: np.ndarray
    n: int
    rank_deficient: bool = False

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ConfigurationError(f"cov shape {self.cov.shape} != ({d}, {d})")
        if np.max(np.abs(self.cov - self.cov.T)) > 1e-8:
            raise ConfigurationError("covariance is not symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -1e-8:
            raise ConfigurationError("covariance has a significantly negative eigenvalue")


def _psd_clamp(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * np.clip(vals, 0.0, None)) @ vecs.T


def frechet_embed_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}).

    The matrix square root uses scipy's Schur method; tiny negative input
    eigenvalues (statistical noise) are clamped to zero first.
    """
    if a.mean.shape != b.mean.shape:
        raise ConfigurationError(
            f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    sa = _psd_clamp(a.cov)
    sb = _psd_clamp(b.cov)
    covmean = scipy.linalg.sqrtm(sa @ sb)
    if np.iscomplexobj(covmean):
        if np.max(np.abs(covmean.imag)) > 1e-6:
            raise ConfigurationError("matrix square root has a large imaginary part")
        covmean = covmean.real
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * np.trace(covmean))


def embed_stats(encoder, images) -> GaussianStats:
    """Sample mean and unbiased covariance of the encoder's class-token
    embeddings; flags rank deficiency when fewer than d + 1 images are
    given (the covariance cannot be full rank)."""
    if len(images) == 0:
        raise ConfigurationError("cannot compute embedding stats of an empty set")
    emb = np.stack([np.asarray(encoder(img), dtype=np.float64) for img in images])
    n, d = emb.shape
    mean = emb.mean(axis=0)
    if n == 1:
        cov = np.zeros((d, d))
    else:
        centered = emb - mean
        cov = centered.T @ centered / (n - 1)
        cov = (cov + cov.T) / 2.0
    return GaussianStats(mean=mean, cov=cov, n=n, rank_deficient=n < d + 1)
