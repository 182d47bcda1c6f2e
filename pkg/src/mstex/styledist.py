"""Style distances between images through RGB-network feature statistics.

All distances accept numpy arrays or torch tensors laid out H x W x C and
return a 0-d tensor, differentiable with respect to tensor inputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb
from typing import Callable, Sequence

import numpy as np
import torch

from .colortransfer import apply
from .features import STATISTICS, FeatureExtractor, extract
from .spectral import project

MAX_ENUMERATED_BANDS = 16

Triplet = tuple[int, int, int]


def default_weights(extractor: FeatureExtractor) -> tuple[float, ...]:
    """w_l = 1 / N_l^2 with N_l the number of feature maps at tap l."""
    return tuple(1.0 / n**2 for n in extractor.channels)


@dataclass(frozen=True)
class TripletBatch:
    triplets: tuple[Triplet, ...]
    rng_seed: int | None = None

    def __post_init__(self):
        if not self.triplets:
            raise ValueError("a triplet batch needs at least one triplet")
        for t in self.triplets:
            if len(t) != 3 or len(set(t)) != 3:
                raise ValueError(f"triplet {t} must hold 3 distinct band indices")

    def __len__(self) -> int:
        return len(self.triplets)


def enumerate_triplets(n: int) -> list[Triplet]:
    """All unordered triples of distinct indices in [0, n), lexicographic."""
    if n < 3:
        raise ValueError(f"need at least 3 bands to form a triplet, got {n}")
    return list(itertools.combinations(range(n), 3))


def sample_triplets(n: int, batch_size: int, rng_seed: int, replace: bool = True) -> TripletBatch:
    """Draw ``batch_size`` triplets uniformly from :func:`enumerate_triplets`.

    With ``replace=False`` the batch holds distinct triplets (requires
    ``batch_size <= C(n, 3)``).
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    pool = enumerate_triplets(n)
    rng = np.random.default_rng(rng_seed)
    if not replace and batch_size > len(pool):
        raise ValueError(f"cannot draw {batch_size} distinct triplets out of {len(pool)}")
    idx = rng.choice(len(pool), size=batch_size, replace=replace)
    return TripletBatch(tuple(pool[i] for i in idx), rng_seed)


class StyleModel:
    """Bundles an extractor, the layer weights and the statistic kind."""

    def __init__(
        self,
        extractor: FeatureExtractor,
        weights: Sequence[float] | None = None,
        statistic: str = "covariance",
    ):
        if statistic not in STATISTICS:
            raise ValueError(f"statistic must be one of {sorted(STATISTICS)}")
        self.extractor = extractor
        self.weights = tuple(default_weights(extractor) if weights is None else weights)
        if len(self.weights) != len(extractor.tap_layers):
            raise ValueError(f"{len(self.weights)} weights for {len(extractor.tap_layers)} tap layers")
        if any(not np.isfinite(w) or w < 0 for w in self.weights):
            raise ValueError("layer weights must be finite and nonnegative")
        self.statistic = statistic
        self._stat_fn: Callable = STATISTICS[statistic]

    @property
    def dtype(self) -> torch.dtype:
        return self.extractor.dtype

    def tensor(self, img) -> torch.Tensor:
        t = torch.as_tensor(img)
        return t if t.dtype == self.dtype else t.to(self.dtype)

    def stats(self, img3) -> list[torch.Tensor]:
        """Per-layer statistics of an H x W x 3 image (or a B x H x W x 3 batch)."""
        return self._stat_fn(extract(self.extractor, self.tensor(img3)))

    def compare(self, stats_a: Sequence[torch.Tensor], stats_b: Sequence[torch.Tensor]) -> torch.Tensor:
        """Weighted squared Frobenius distance; batched stats give one value per item."""
        total = 0
        for w, ga, gb in zip(self.weights, stats_a, stats_b):
            total = total + w * ((ga - gb) ** 2).sum(dim=(-2, -1))
        return total


def _check3(img) -> None:
    if img.shape[-1] != 3:
        raise ValueError(f"style distance needs 3-channel images, got {img.shape[-1]} channels")


def style_distance(a, b, model: StyleModel) -> torch.Tensor:
    """sum_l w_l ||G_l(a) - G_l(b)||_F^2 for two H x W x 3 images."""
    _check3(a)
    _check3(b)
    return model.compare(model.stats(a), model.stats(b))


def _bands(img, triplet: Triplet):
    return img[..., list(triplet)]


def _check_same_bands(a, b) -> int:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"band count mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    if a.shape[-1] < 3:
        raise ValueError("multispectral style distances need at least 3 bands")
    return a.shape[-1]


def stochastic_style_distance(ref, img, batch: TripletBatch, model: StyleModel) -> torch.Tensor:
    """Mean style distance over the triplets of ``batch``.

    Triplet images are stacked and sent through the network in one pass;
    per-triplet terms are summed in batch order.
    """
    _check_same_bands(ref, img)
    ref_t, img_t = model.tensor(ref), model.tensor(img)
    idx = torch.tensor(batch.triplets)
    ref_stack = ref_t[..., idx].permute(2, 0, 1, 3)
    img_stack = img_t[..., idx].permute(2, 0, 1, 3)
    terms = model.compare(model.stats(ref_stack), model.stats(img_stack))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total / len(batch)


def exact_expected_style_distance(ref, img, model: StyleModel) -> torch.Tensor:
    """Average of the style distance over every band triplet.

    Computed one triplet at a time, independently of the batched path used
    by :func:`stochastic_style_distance`.
    """
    n = _check_same_bands(ref, img)
    if n > MAX_ENUMERATED_BANDS:
        raise ValueError(f"{comb(n, 3)} triplets for {n} bands; enumeration limited to {MAX_ENUMERATED_BANDS} bands")
    ref_t, img_t = model.tensor(ref), model.tensor(img)
    triplets = enumerate_triplets(n)
    total = 0
    for t in triplets:
        total = total + style_distance(_bands(ref_t, t), _bands(img_t, t), model)
    return total / len(triplets)


def projected_style_distance(ref, img, projector, model: StyleModel) -> torch.Tensor:
    """Style distance between the 3-channel projections of two N-band images."""
    return style_distance(project(projector, model.tensor(ref)), project(projector, model.tensor(img)), model)


def projected_color_style_distance(ref, img, projector, transform, model: StyleModel) -> torch.Tensor:
    """Style distance after projecting and colour-transferring both images.

    ``transform`` is shared by both images; it should map the moments of the
    exemplar's projection onto the palette's moments.
    """
    a = apply(transform, project(projector, model.tensor(ref)))
    b = apply(transform, project(projector, model.tensor(img)))
    return style_distance(a, b, model)
