"""Seeded synthetic multispectral textures for tests and desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .imageio import MultispectralImage


def gaussian_field(height: int, width: int, rng: np.random.Generator, slope: float = 3.0) -> np.ndarray:
    """Stationary Gaussian field with a power-law spectrum, unit variance."""
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.fftfreq(width)[None, :]
    r = np.hypot(fy, fx)
    r[0, 0] = 1.0
    amp = r ** (-slope / 2)
    amp[0, 0] = 0.0
    noise = rng.standard_normal((height, width))
    field = np.real(np.fft.ifft2(np.fft.fft2(noise) * amp))
    return (field - field.mean()) / field.std()


def correlated_field(height: int, width: int, bands: int, seed: int,
                     n_sources: int = 3, slope: float = 3.0, noise: float = 0.02) -> MultispectralImage:
    """Cloud-like exemplar: a few spatial Gaussian fields mixed across bands.

    Values are affinely mapped into [0, 1]; bands are strongly but not
    perfectly correlated.
    """
    rng = np.random.default_rng(seed)
    sources = np.stack([gaussian_field(height, width, rng, slope) for _ in range(n_sources)], axis=-1)
    mixing = rng.uniform(0.2, 1.0, size=(n_sources, bands))
    data = sources @ mixing + noise * rng.standard_normal((height, width, bands))
    data = (data - data.min()) / (data.max() - data.min())
    return MultispectralImage(0.05 + 0.9 * data, source_id=f"field-{seed}")


def low_rank_corpus(n_images: int, height: int, width: int, bands: int, seed: int,
                    rank: int = 3, noise: float = 1e-4) -> list[MultispectralImage]:
    """Images whose pixel spectra lie on a shared rank-``rank`` affine subspace plus tiny noise."""
    rng = np.random.default_rng(seed)
    basis = rng.standard_normal((rank, bands))
    offset = rng.uniform(0.3, 0.6, size=bands)
    out = []
    for i in range(n_images):
        coeff = np.stack([gaussian_field(height, width, rng, 2.0) for _ in range(rank)], axis=-1)
        data = 0.05 * coeff @ basis + offset + noise * rng.standard_normal((height, width, bands))
        out.append(MultispectralImage(data, source_id=f"lowrank-{seed}-{i}"))
    return out
