"""Affine colour transfer matching first and second moments through Cholesky factors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

JITTER_REL = 1e-8
JITTER_ABS = 1e-12


@dataclass(frozen=True)
class ColorMoments:
    mean: np.ndarray
    covariance: np.ndarray
    cholesky: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def jittered_cholesky(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cholesky factor of ``cov``, adding eps*I when the factor is (near) singular.

    eps = 1e-8 * trace / dim, floored at 1e-12. Returns the (possibly
    jittered) covariance together with its factor.
    """
    cov = (cov + cov.T) / 2
    d = cov.shape[0]
    eps = max(JITTER_REL * np.trace(cov) / d, JITTER_ABS)
    try:
        chol = np.linalg.cholesky(cov)
        if np.min(np.diag(chol)) ** 2 > eps:
            return cov, chol
    except np.linalg.LinAlgError:
        pass
    cov = cov + eps * np.eye(d)
    return cov, np.linalg.cholesky(cov)


def moments_of(pixels: np.ndarray) -> ColorMoments:
    """Population mean/covariance of an M x d pixel matrix."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.shape[0] < 2:
        raise ValueError("need at least 2 pixels to estimate moments")
    mean = px.mean(axis=0)
    centred = px - mean
    cov = centred.T @ centred / px.shape[0]
    cov, chol = jittered_cholesky(cov)
    return ColorMoments(mean, cov, chol)


def compute_moments(img3) -> ColorMoments:
    """Moments of an H x W x 3 image (any array-like, including palettes)."""
    data = np.asarray(getattr(img3, "data", img3), dtype=np.float64)
    if data.shape[-1] != 3:
        raise ValueError(f"colour moments need 3 channels, got {data.shape[-1]}")
    return moments_of(data.reshape(-1, 3))


@dataclass(frozen=True)
class ColorTransform:
    """x -> target.mean + L_target L_source^{-1} (x - source.mean)."""

    source: ColorMoments
    target: ColorMoments

    @property
    def matrix(self) -> np.ndarray:
        # L_t L_s^{-1} via a triangular solve: (L_s^{-T} L_t^T)^T
        return np.linalg.solve(self.source.cholesky.T, self.target.cholesky.T).T

    @property
    def offset(self) -> np.ndarray:
        return self.target.mean - self.matrix @ self.source.mean


def transfer_between(source_img, palette) -> ColorTransform:
    return ColorTransform(compute_moments(source_img), compute_moments(palette))


def apply(t: ColorTransform, img3):
    """Apply the transform to every pixel; numpy and torch inputs are accepted."""
    a, b = t.matrix, t.offset
    if isinstance(img3, torch.Tensor):
        a_t = torch.as_tensor(a, dtype=img3.dtype)
        b_t = torch.as_tensor(b, dtype=img3.dtype)
        return img3 @ a_t.T + b_t
    return np.asarray(img3, dtype=np.float64) @ a.T + b


def inverse(t: ColorTransform) -> ColorTransform:
    return ColorTransform(t.target, t.source)
