"""Texture-quality metrics for (exemplar, synthesis) pairs of multispectral images.

Transport metrics divide by the square root of the sample count, so values do
not grow with image size.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .imageio import MultispectralImage
from .spectral import Projector
from .styledist import (
    StyleModel,
    exact_expected_style_distance,
    projected_style_distance,
    style_distance,
)

SPECTRUM_EPS = 1e-12
DEFAULT_DIRECTIONS = 1000
RGB_BANDS = (1, 2, 3)  # bands 2, 3, 4 (0-based positions)
PSD_TOL = 1e-8


@dataclass(frozen=True)
class DirectionSet:
    directions: np.ndarray  # K x N, unit rows
    rng_seed: int | None = None

    @classmethod
    def sample(cls, dim: int, k: int = DEFAULT_DIRECTIONS, rng_seed: int = 0) -> "DirectionSet":
        """Uniform directions on the sphere (normalised Gaussian draws)."""
        if k < 1 or dim < 1:
            raise ValueError("need k >= 1 directions in dimension >= 1")
        rng = np.random.default_rng(rng_seed)
        v = rng.standard_normal((k, dim))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        while np.any(norms == 0):  # pragma: no cover - measure-zero event
            bad = norms[:, 0] == 0
            v[bad] = rng.standard_normal((int(bad.sum()), dim))
            norms = np.linalg.norm(v, axis=1, keepdims=True)
        return cls(v / norms, rng_seed)

    @property
    def dim(self) -> int:
        return self.directions.shape[1]


def wasserstein_1d(a, b) -> float:
    """||sort(a) - sort(b)||_2 / sqrt(len) for two equal-size samples."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size == 0:
        raise ValueError(f"need equal, non-empty sample sizes, got {a.size} and {b.size}")
    return float(np.sqrt(np.mean((np.sort(a) - np.sort(b)) ** 2)))


def sliced_wasserstein(x, y, dirs: DirectionSet) -> float:
    """sqrt(mean over directions of W2(x.v, y.v)^2) for M x N point sets."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape != y.shape:
        raise ValueError(f"point sets must have equal shapes, got {x.shape} and {y.shape}")
    if x.shape[1] != dirs.dim:
        raise ValueError(f"directions live in dimension {dirs.dim}, points in {x.shape[1]}")
    px = np.sort(x @ dirs.directions.T, axis=0)
    py = np.sort(y @ dirs.directions.T, axis=0)
    return float(np.sqrt(np.mean((px - py) ** 2)))


def _data(img) -> np.ndarray:
    data = np.asarray(getattr(img, "data", img), dtype=np.float64)
    return data[:, :, None] if data.ndim == 2 else data


def hist_distance(a, b, dirs: DirectionSet) -> float:
    da, db = _data(a), _data(b)
    return sliced_wasserstein(da.reshape(-1, da.shape[2]), db.reshape(-1, db.shape[2]), dirs)


def hist_distance_band(a, b, band: int) -> float:
    return wasserstein_1d(_data(a)[:, :, band], _data(b)[:, :, band])


# -- Gaussian summaries -------------------------------------------------------

def _moments(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    px = data.reshape(-1, data.shape[-1])
    mu = px.mean(axis=0)
    c = px - mu
    return mu, c.T @ c / len(px)


def _psd_sqrt(m: np.ndarray, name: str) -> np.ndarray:
    m = (m + m.T) / 2
    w, v = np.linalg.eigh(m)
    scale = max(float(np.abs(w).max()), 1.0)
    if w.min() < -PSD_TOL * scale:
        raise ValueError(f"{name} is not positive semi-definite (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def gaussian_wasserstein(mu_a, cov_a, mu_b, cov_b) -> float:
    """Closed-form W2 between N(mu_a, cov_a) and N(mu_b, cov_b)."""
    cov_a = np.asarray(cov_a, dtype=np.float64)
    cov_b = np.asarray(cov_b, dtype=np.float64)
    root_a = _psd_sqrt(cov_a, "first covariance")
    _psd_sqrt(cov_b, "second covariance")
    mean_term = float(np.sum((np.asarray(mu_a) - np.asarray(mu_b)) ** 2))
    if np.array_equal(cov_a, cov_b):
        # the trace term vanishes; skip the rounding noise of the matrix roots
        return float(np.sqrt(mean_term))
    cross = _psd_sqrt(root_a @ cov_b @ root_a, "cross term")
    trace = float(np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(cross))
    return float(np.sqrt(max(mean_term + max(trace, 0.0), 0.0)))


def gaussian_distances(a, b) -> tuple[float, float, float]:
    """(L_mu, L_Sigma, L_RX): mean gap, Frobenius covariance gap, Gaussian W2."""
    mu_a, cov_a = _moments(_data(a))
    mu_b, cov_b = _moments(_data(b))
    l_mu = float(np.linalg.norm(mu_a - mu_b))
    l_sigma = float(np.linalg.norm(cov_a - cov_b, "fro"))
    return l_mu, l_sigma, gaussian_wasserstein(mu_a, cov_a, mu_b, cov_b)


# -- radial spectrum ----------------------------------------------------------

@dataclass(frozen=True)
class RadialSpectrum:
    """Mean Fourier magnitude per integer-radius annulus.

    Arrays cover every radius present in the frequency grid (corners
    included); ``nyquist`` is the last radius used for comparisons.
    ``power`` holds the mean squared magnitude per annulus.
    """

    radii: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    power: np.ndarray
    nyquist: int


def radial_spectrum(band_img) -> RadialSpectrum:
    img = np.asarray(band_img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"radial spectrum needs a single-channel image, got shape {img.shape}")
    h, w = img.shape
    f = np.fft.fftshift(np.fft.fft2(img))
    mag = np.abs(f)
    ky = np.arange(h) - h // 2
    kx = np.arange(w) - w // 2
    r = np.rint(np.hypot(ky[:, None], kx[None, :])).astype(int).ravel()
    counts = np.bincount(r)
    keep = counts > 0
    sums = np.bincount(r, weights=mag.ravel())
    psums = np.bincount(r, weights=(mag**2).ravel())
    radii = np.nonzero(keep)[0]
    return RadialSpectrum(
        radii=radii,
        values=sums[keep] / counts[keep],
        counts=counts[keep],
        power=psums[keep] / counts[keep],
        nyquist=min(h, w) // 2,
    )


def _log_spectrum(img2d: np.ndarray) -> np.ndarray:
    rs = radial_spectrum(img2d)
    sel = (rs.radii >= 1) & (rs.radii <= rs.nyquist)
    return np.log(rs.values[sel] + SPECTRUM_EPS)


def spectrum_distance(a, b, band: int | None = None) -> float:
    """l2 distance between log radial spectra for r in [1, Nyquist].

    ``band=None`` compares the across-band mean images.
    """
    da, db = _data(a), _data(b)
    if band is None:
        ia, ib = da.mean(axis=2), db.mean(axis=2)
    else:
        ia, ib = da[:, :, band], db[:, :, band]
    la, lb = _log_spectrum(ia), _log_spectrum(ib)
    if la.shape != lb.shape:
        raise ValueError("spectra of images with different sizes cannot be compared")
    return float(np.linalg.norm(la - lb))


# -- gradients ------------------------------------------------------------------

@dataclass(frozen=True)
class GradientField:
    dx: np.ndarray
    dy: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)


def gradient_field(img) -> GradientField:
    """Forward differences cropped to the (H-1) x (W-1) valid region."""
    d = _data(img)
    base = d[:-1, :-1]
    return GradientField(dx=d[:-1, 1:] - base, dy=d[1:, :-1] - base)


def gradient_distance(a, b, dirs: DirectionSet) -> float:
    ga, gb = gradient_field(a).magnitude, gradient_field(b).magnitude
    n = ga.shape[2]
    return sliced_wasserstein(ga.reshape(-1, n), gb.reshape(-1, n), dirs)


def gradient_distance_band(a, b, band: int) -> float:
    return wasserstein_1d(gradient_field(a).magnitude[:, :, band], gradient_field(b).magnitude[:, :, band])


# -- reports ----------------------------------------------------------------------

SCALAR_KEYS = (
    "L_style^MS",
    "L_style^PCA",
    "L_style^RGB",
    "L_sp^mean",
    "L_grad",
    "L_hist",
    "L_mu",
    "L_Sigma",
    "L_RX",
)
BAND_KEYS = ("L_sp^lambda", "L_grad^lambda", "L_hist^lambda")


@dataclass
class MetricsReport:
    """Scalar metrics plus per-band metrics keyed by band label.

    A scalar is ``None`` when it does not apply (e.g. no projector given).
    """

    scalars: dict[str, float | None] = field(default_factory=dict)
    bands: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {**self.scalars, **self.bands}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls({k: d.get(k) for k in SCALAR_KEYS}, {k: dict(d.get(k, {})) for k in BAND_KEYS})

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    def csv_row(self) -> dict[str, float | None]:
        row = dict(self.scalars)
        for key, per_band in self.bands.items():
            for label, v in per_band.items():
                row[f"{key}[{label}]"] = v
        return row


def write_reports_csv(rows: Sequence[dict], path) -> Path:
    """Rows are dicts holding provenance fields plus :meth:`MetricsReport.csv_row` entries."""
    path = Path(path)
    keys: list[str] = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def _style_metrics(a: np.ndarray, b: np.ndarray, model: StyleModel | None,
                   projector: Projector | None, rgb_bands) -> dict[str, float | None]:
    out: dict[str, float | None] = {"L_style^MS": None, "L_style^PCA": None, "L_style^RGB": None}
    if model is None:
        return out
    n = a.shape[2]
    with torch.no_grad():
        if n >= 3:
            out["L_style^MS"] = float(exact_expected_style_distance(a, b, model))
        if projector is not None and projector.num_bands == n:
            out["L_style^PCA"] = float(projected_style_distance(a, b, projector, model))
        if n == 3:
            out["L_style^RGB"] = float(style_distance(a, b, model))
        elif rgb_bands is not None and n > max(rgb_bands):
            idx = list(rgb_bands)
            out["L_style^RGB"] = float(style_distance(a[:, :, idx], b[:, :, idx], model))
    return out


def evaluate_pair(exemplar, synthesis, model: StyleModel | None = None,
                  projector: Projector | None = None, dirs: DirectionSet | None = None,
                  gradient_dirs: DirectionSet | None = None,
                  rgb_bands: Sequence[int] | None = RGB_BANDS,
                  band_labels: Sequence[str] | None = None) -> MetricsReport:
    """Every metric for one (exemplar, synthesis) pair.

    ``dirs`` defaults to 1000 directions drawn with seed 0; the same set is
    used for the gradient metric unless ``gradient_dirs`` is given.
    """
    a, b = _data(exemplar), _data(synthesis)
    if a.shape != b.shape:
        raise ValueError(f"exemplar {a.shape} and synthesis {b.shape} must have equal shapes")
    n = a.shape[2]
    if band_labels is None:
        band_labels = getattr(exemplar, "band_labels", None) or [f"band_{i + 1}" for i in range(n)]
    dirs = dirs or DirectionSet.sample(n)
    gradient_dirs = gradient_dirs or dirs
    scalars = _style_metrics(a, b, model, projector, rgb_bands)
    l_mu, l_sigma, l_rx = gaussian_distances(a, b)
    scalars.update({
        "L_sp^mean": spectrum_distance(a, b),
        "L_grad": gradient_distance(a, b, gradient_dirs),
        "L_hist": hist_distance(a, b, dirs),
        "L_mu": l_mu,
        "L_Sigma": l_sigma,
        "L_RX": l_rx,
    })
    bands = {
        "L_sp^lambda": {lab: spectrum_distance(a, b, i) for i, lab in enumerate(band_labels)},
        "L_grad^lambda": {lab: gradient_distance_band(a, b, i) for i, lab in enumerate(band_labels)},
        "L_hist^lambda": {lab: hist_distance_band(a, b, i) for i, lab in enumerate(band_labels)},
    }
    return MetricsReport({k: scalars[k] for k in SCALAR_KEYS}, bands)
