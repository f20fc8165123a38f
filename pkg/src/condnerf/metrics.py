"""Image-set and image-pair quality metrics: Frechet distance, KID, PSNR and SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .errors import ContractError


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @property
    def dim(self):
        return self.mean.shape[0]

    @classmethod
    def from_features(cls, features):
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise ContractError("feature statistics need a (n >= 2, dim) matrix")
        return cls(f.mean(axis=0), np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1]), f.shape[0])


def _sqrtm_psd(c, tol=1e-6):
    vals, vecs = np.linalg.eigh((c + c.T) / 2)
    if vals.min(initial=0.0) < -tol * max(1.0, np.abs(vals).max(initial=0.0)):
        raise ContractError(f"matrix is not positive semidefinite (eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T, np.clip(vals, 0, None)


def frechet_distance(real, gen):
    """Squared Frechet distance between two Gaussian fits.

    Tr((C_r C_g)^{1/2}) is evaluated as the sum of square roots of the eigenvalues
    of the symmetric matrix C_r^{1/2} C_g C_r^{1/2}.
    """
    if real.dim != gen.dim:
        raise ContractError(f"feature dimensions differ: {real.dim} vs {gen.dim}")
    root_r, _ = _sqrtm_psd(real.cov)
    _sqrtm_psd(gen.cov)  # validates PSD
    _, vals = _sqrtm_psd(root_r @ gen.cov @ root_r)
    diff = real.mean - gen.mean
    value = diff @ diff + np.trace(real.cov) + np.trace(gen.cov) - 2 * np.sqrt(vals).sum()
    return float(max(value, 0.0))


def polynomial_kernel(x, y):
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def kid(real, gen):
    """Unbiased squared MMD with the cubic polynomial kernel.

    Within-set sums exclude the diagonal. With equal set sizes the cross term
    also drops the (i, i) pairs, which makes the estimate a single U-statistic
    over paired samples (and exactly 0 for two copies of one set).
    """
    x = np.asarray(real, dtype=np.float64)
    y = np.asarray(gen, dtype=np.float64)
    if x.ndim == 1:
        x, y = x[:, None], y[:, None]
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ContractError("KID needs at least 2 samples per set")
    if x.shape[1] != y.shape[1]:
        raise ContractError("feature dimensions differ")
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        # paired form: cross pairs (i, i) are excluded as well
        sxy = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        sxy = kxy.mean()
    return float(sxx + syy - 2 * sxy)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, max_value=1.0):
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    if max_value <= 0:
        raise ContractError("max_value must be positive")
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10 * np.log10(max_value**2 / mse))


def ssim(a, b, max_value=1.0, window=8):
    """Mean SSIM over all valid 8x8 uniform windows (stride 1) and channels of (H, W[, C]) images."""
    if max_value <= 0:
        raise ContractError("max_value must be positive")
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ContractError(f"images must be at least {window}x{window}")
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2
    wa = sliding_window_view(a, (window, window), axis=(0, 1))
    wb = sliding_window_view(b, (window, window), axis=(0, 1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def extract_features(images, classifier, batch_size=64):
    """Penultimate classifier activations, one row per image (resized to the classifier input)."""
    if not getattr(classifier, "trained", False):
        raise ContractError("feature extraction needs a pretrained classifier")
    rows = []
    with ad.no_grad():
        for s in range(0, len(images), batch_size):
            batch = classifier.prepare(np.asarray(images[s : s + batch_size]))
            rows.append(classifier.features(batch).values.astype(np.float64))
    if not rows:
        return np.zeros((0, classifier.feature_dim))
    return np.concatenate(rows)
