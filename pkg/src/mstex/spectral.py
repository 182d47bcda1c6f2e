"""Principal-component projector from N spectral bands to 3 channels."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

PROJECTOR_FORMAT_VERSION = 1
N_COMPONENTS = 3


class ProjectorError(ValueError):
    pass


@dataclass(frozen=True)
class Projector:
    mean: np.ndarray  # (N,)
    components: np.ndarray  # (3, N), orthonormal rows
    eigenvalues: np.ndarray  # (N,), nonincreasing
    fitted_on: str = ""

    @property
    def num_bands(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def identity(cls) -> "Projector":
        return cls(np.zeros(3), np.eye(3), np.ones(3), "identity")


def _canonical_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so that its largest-magnitude entry is positive."""
    pivots = vectors[np.arange(len(vectors)), np.argmax(np.abs(vectors), axis=1)]
    return vectors * np.where(pivots < 0, -1.0, 1.0)[:, None]


def fit_pca(corpus: Sequence, fitted_on: str = "") -> Projector:
    """Fit the projector on the pooled pixels of every image in ``corpus``.

    Moments are accumulated image by image, so only N x N sums are held in
    memory. Items may be :class:`~mstex.imageio.MultispectralImage` objects or
    H x W x N arrays.
    """
    if not corpus:
        raise ProjectorError("empty corpus")
    n = shift = None
    count, total, outer = 0, None, None
    for item in corpus:
        data = np.asarray(getattr(item, "data", item), dtype=np.float64)
        px = data.reshape(-1, data.shape[-1])
        if n is None:
            n = px.shape[1]
            if n < N_COMPONENTS:
                raise ProjectorError(f"need at least {N_COMPONENTS} bands, got {n}")
            # moments are accumulated about the first image's mean to limit cancellation
            shift = px.mean(axis=0)
            total, outer = np.zeros(n), np.zeros((n, n))
        elif px.shape[1] != n:
            raise ProjectorError(f"inconsistent band counts: {n} and {px.shape[1]}")
        px = px - shift
        count += len(px)
        total += px.sum(axis=0)
        outer += px.T @ px
    centred_mean = total / count
    mean = centred_mean + shift
    cov = outer / count - np.outer(centred_mean, centred_mean)
    cov = (cov + cov.T) / 2
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    rank = int(np.sum(evals > 1e-12 * max(evals[0], np.finfo(float).tiny)))
    if rank < N_COMPONENTS:
        raise ProjectorError(f"pixel covariance has rank {rank}; need {N_COMPONENTS} independent spectral directions")
    components = _canonical_signs(evecs[:, :N_COMPONENTS].T)
    return Projector(mean, components, evals, fitted_on)


def explained_variance_ratio(p: Projector, k: int) -> float:
    if not 1 <= k <= len(p.eigenvalues):
        raise ValueError(f"k must be in [1, {len(p.eigenvalues)}], got {k}")
    total = p.eigenvalues.sum()
    if total <= 0:
        return 1.0
    return float(min(1.0, p.eigenvalues[:k].sum() / total))


def project(p: Projector, img):
    """Per-pixel ``components @ (pixel - mean)``; no clipping.

    Works on numpy arrays and on (differentiable) torch tensors, with the
    band axis last.
    """
    if img.shape[-1] != p.num_bands:
        raise ValueError(f"projector expects {p.num_bands} bands, image has {img.shape[-1]}")
    if isinstance(img, torch.Tensor):
        mean = torch.as_tensor(p.mean, dtype=img.dtype)
        comp = torch.as_tensor(p.components, dtype=img.dtype)
        return (img - mean) @ comp.T
    return (np.asarray(img, dtype=np.float64) - p.mean) @ p.components.T


def save_projector(p: Projector, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format_version": PROJECTOR_FORMAT_VERSION,
        "fitted_on": p.fitted_on,
        "mean": p.mean.tolist(),
        "components": p.components.tolist(),
        "eigenvalues": p.eigenvalues.tolist(),
    }
    path.write_text(json.dumps(doc, indent=1))
    return path


def load_projector(path) -> Projector:
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != PROJECTOR_FORMAT_VERSION:
        raise ProjectorError(f"{path}: projector format version {version}, expected {PROJECTOR_FORMAT_VERSION}")
    return Projector(
        np.array(doc["mean"], dtype=np.float64),
        np.array(doc["components"], dtype=np.float64),
        np.array(doc["eigenvalues"], dtype=np.float64),
        doc.get("fitted_on", ""),
    )
