"""Exemplar-based synthesis: moment-matched Gaussian start, then L-BFGS on pixels.

Objectives:

``stochastic``       mean style distance over a batch of band triplets, redrawn
                     every iteration and frozen during that iteration's line search
``projected``        style distance between PCA projections
``projected_color``  as ``projected`` followed by a colour transfer onto a palette
``rgb_plain``        plain style distance on a 3-band exemplar
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.optim.lbfgs import _strong_wolfe

from . import colortransfer
from .imageio import MultispectralImage, PaletteImage
from .spectral import Projector, project
from .styledist import StyleModel, TripletBatch, sample_triplets

log = logging.getLogger(__name__)

OBJECTIVES = ("stochastic", "projected", "projected_color", "rgb_plain")
MIN_EXEMPLAR_SIZE = 64


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthesisConfig:
    objective: str = "stochastic"
    iterations: int = 500
    batch_size: int = 10
    rng_seed: int = 0
    history_size: int = 20
    max_evals: int = 20
    line_search: str = "strong_wolfe"
    step_size: float = 1.0
    tolerance_grad: float = 1e-12
    sample_with_replacement: bool = True
    height: int | None = None
    width: int | None = None
    init: str = "gaussian"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.history_size < 1 or self.max_evals < 1:
            raise ValueError("history_size and max_evals must be >= 1")
        if self.line_search not in ("strong_wolfe", "none"):
            raise ValueError("line_search must be 'strong_wolfe' or 'none'")
        if self.init not in ("gaussian", "exemplar"):
            raise ValueError("init must be 'gaussian' or 'exemplar'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthesisTrace:
    losses: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    evaluations: list[int] = field(default_factory=list)
    final_loss: float = float("nan")
    seed: int = 0
    converged: bool = False
    config: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.losses)

    def best_so_far(self) -> list[float]:
        return np.minimum.accumulate(self.losses).tolist() if self.losses else []

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "loss", "seconds"])
            for i, (loss, sec) in enumerate(zip(self.losses, self.seconds)):
                w.writerow([i, repr(loss), f"{sec:.6f}"])
        return path


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray
    cholesky: np.ndarray


def compute_summary(img) -> GaussianSummary:
    """Population mean/covariance of the pixel spectra with a jittered Cholesky factor."""
    data = np.asarray(getattr(img, "data", img), dtype=np.float64)
    m = colortransfer.moments_of(data.reshape(-1, data.shape[-1]))
    return GaussianSummary(m.mean, m.covariance, m.cholesky)


def gaussian_init(summary: GaussianSummary, height: int, width: int, rng_seed: int,
                  band_labels: Sequence[str] = ()) -> MultispectralImage:
    """Pixels drawn i.i.d. from N(mean, covariance) through the Cholesky factor."""
    rng = np.random.default_rng(rng_seed)
    n = summary.mean.shape[0]
    z = rng.standard_normal((height * width, n))
    data = (z @ summary.cholesky.T + summary.mean).reshape(height, width, n)
    return MultispectralImage(data, tuple(band_labels), source_id=f"gaussian-{rng_seed}")


class Objective:
    """Style objective with the exemplar side precomputed (and cached per triplet)."""

    def __init__(self, exemplar: np.ndarray, cfg: SynthesisConfig, model: StyleModel,
                 projector: Projector | None = None, palette: PaletteImage | None = None):
        self.cfg = cfg
        self.model = model
        self.n_bands = exemplar.shape[-1]
        self.transform = None
        ref = model.tensor(np.asarray(exemplar, dtype=np.float64))
        kind = cfg.objective
        if kind in ("projected", "projected_color"):
            if projector is None:
                raise SynthesisError(f"objective {kind!r} requires a projector")
            if projector.num_bands != self.n_bands:
                raise SynthesisError(f"projector expects {projector.num_bands} bands, exemplar has {self.n_bands}")
        if kind == "projected_color" and palette is None:
            raise SynthesisError("objective 'projected_color' requires a palette image")
        if kind == "stochastic" and self.n_bands < 3:
            raise SynthesisError("stochastic objective needs at least 3 bands")
        if kind == "rgb_plain" and self.n_bands != 3:
            raise SynthesisError(f"rgb_plain objective needs a 3-band exemplar, got {self.n_bands}")
        self.projector = projector
        self._ref = ref
        self._triplet_stats: dict = {}
        with torch.no_grad():
            if kind == "stochastic":
                self._ref_stats = None
            else:
                self._ref_stats = [s.detach() for s in model.stats(self.to_rgb(ref, palette))]

    def to_rgb(self, x: torch.Tensor, palette: PaletteImage | None = None) -> torch.Tensor:
        kind = self.cfg.objective
        if kind == "rgb_plain":
            return x
        p = project(self.projector, x)
        if kind == "projected":
            return p
        if self.transform is None:
            # one transform, fitted on the exemplar's projection, shared by both images
            self.transform = colortransfer.transfer_between(p.detach().cpu().numpy(), palette.data)
        return colortransfer.apply(self.transform, p)

    def _stats_for(self, triplets: Sequence[tuple[int, int, int]]) -> list[torch.Tensor]:
        missing = [t for t in dict.fromkeys(triplets) if t not in self._triplet_stats]
        if missing:
            idx = torch.tensor(missing)
            with torch.no_grad():
                stats = self.model.stats(self._ref[..., idx].permute(2, 0, 1, 3))
            for i, t in enumerate(missing):
                self._triplet_stats[t] = [s[i] for s in stats]
        per_layer = zip(*(self._triplet_stats[t] for t in triplets))
        return [torch.stack(layer) for layer in per_layer]

    def __call__(self, x: torch.Tensor, batch: TripletBatch | None = None) -> torch.Tensor:
        if self.cfg.objective != "stochastic":
            return self.model.compare(self.model.stats(self.to_rgb(x)), self._ref_stats)
        idx = torch.tensor(batch.triplets)
        stack = x[..., idx].permute(2, 0, 1, 3)
        terms = self.model.compare(self.model.stats(stack), self._stats_for(batch.triplets))
        total = terms[0]
        for term in terms[1:]:
            total = total + term
        return total / len(batch)


class _FrozenBatchLBFGS:
    """L-BFGS over a flat pixel vector where each iteration sees one frozen objective.

    Curvature pairs use gradients of that iteration's objective at both ends
    of the step, so redrawing the triplet batch between iterations never mixes
    two objectives in one pair.
    """

    def __init__(self, history_size: int, max_evals: int, line_search: str, step_size: float):
        self.history_size = history_size
        self.max_evals = max_evals
        self.line_search = line_search
        self.step_size = step_size
        self.s: list[torch.Tensor] = []
        self.y: list[torch.Tensor] = []
        self.n_steps = 0

    def direction(self, g: torch.Tensor) -> torch.Tensor:
        q = -g.clone()
        rhos = [1.0 / float(y.dot(s)) for s, y in zip(self.s, self.y)]
        alphas = []
        for s, y, rho in reversed(list(zip(self.s, self.y, rhos))):
            a = rho * float(s.dot(q))
            alphas.append(a)
            q.add_(y, alpha=-a)
        if self.s:
            s, y = self.s[-1], self.y[-1]
            q.mul_(float(s.dot(y)) / float(y.dot(y)))
        for (s, y, rho), a in zip(zip(self.s, self.y, rhos), reversed(alphas)):
            b = rho * float(y.dot(q))
            q.add_(s, alpha=a - b)
        return q

    def step(self, fn, x: torch.Tensor, f: float, g: torch.Tensor):
        """One iteration from (x, f, g); returns (x_new, f_new, g_new, evals)."""
        d = self.direction(g)
        gtd = float(g.dot(d))
        if gtd > -1e-30:
            # not a descent direction: drop the history and fall back to steepest descent
            self.s.clear()
            self.y.clear()
            d = -g
            gtd = float(g.dot(d))
        if self.n_steps == 0 and not self.s:
            t = min(1.0, 1.0 / float(g.abs().sum())) * self.step_size
        else:
            t = self.step_size
        if self.line_search == "strong_wolfe":
            def obj(_x, t_, d_):
                return fn(x + t_ * d_)
            f_new, g_new, t, evals = _strong_wolfe(
                obj, x, t, d, f, g, gtd, max_ls=max(1, self.max_evals - 1)
            )
        else:
            f_new, g_new = fn(x + t * d)
            evals = 1
        s = t * d
        y = g_new - g
        if float(y.dot(s)) > 1e-10:
            if len(self.s) == self.history_size:
                self.s.pop(0)
                self.y.pop(0)
            self.s.append(s)
            self.y.append(y)
        self.n_steps += 1
        return x + s, f_new, g_new, evals


def _value_and_grad(objective: Objective, shape, batch):
    def fn(x_flat: torch.Tensor):
        x = x_flat.detach().view(shape).requires_grad_(True)
        loss = objective(x, batch)
        (grad,) = torch.autograd.grad(loss, x)
        return float(loss.detach()), grad.reshape(-1)
    return fn


def _run(exemplar: MultispectralImage, cfg: SynthesisConfig, model: StyleModel,
         projector, palette, seed: int) -> tuple[np.ndarray, SynthesisTrace]:
    objective = Objective(exemplar.data, cfg, model, projector, palette)
    h = cfg.height or exemplar.height
    w = cfg.width or exemplar.width
    if cfg.init == "exemplar":
        if (h, w) != (exemplar.height, exemplar.width):
            raise SynthesisError("exemplar initialisation requires the exemplar's size")
        start = exemplar.data
    else:
        start = gaussian_init(compute_summary(exemplar), h, w, seed).data
    shape = (h, w, exemplar.num_bands)
    x = torch.as_tensor(np.ascontiguousarray(start), dtype=model.dtype).reshape(-1).clone()
    opt = _FrozenBatchLBFGS(cfg.history_size, cfg.max_evals, cfg.line_search, cfg.step_size)
    trace = SynthesisTrace(seed=seed, config=cfg.to_dict())
    master = np.random.default_rng(seed)
    stochastic = cfg.objective == "stochastic"
    cached = None  # (f, g) at x for deterministic objectives

    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        batch = None
        if stochastic:
            batch = sample_triplets(exemplar.num_bands, cfg.batch_size, int(master.integers(2**63)),
                                    replace=cfg.sample_with_replacement)
        fn = _value_and_grad(objective, shape, batch)
        if cached is None:
            f, g = fn(x)
            evals = 1
        else:
            (f, g), evals = cached, 0
        if not np.isfinite(f):
            raise _NonFinite(it)
        trace.losses.append(f)
        if f == 0.0 or float(g.abs().max()) <= cfg.tolerance_grad:
            trace.seconds.append(time.perf_counter() - t0)
            trace.evaluations.append(evals)
            trace.converged = True
            break
        x, f_new, g_new, ls_evals = opt.step(fn, x, f, g)
        if not np.isfinite(f_new) or not torch.isfinite(x).all():
            raise _NonFinite(it)
        cached = None if stochastic else (f_new, g_new)
        trace.seconds.append(time.perf_counter() - t0)
        trace.evaluations.append(evals + ls_evals)
        if it % 50 == 0:
            log.debug("iteration %d loss %.6g", it, f)

    x_img = x.detach().view(shape)
    with torch.no_grad():
        final_batch = batch if stochastic else None
        trace.final_loss = float(objective(x_img, final_batch))
    return x_img.cpu().numpy().astype(np.float64), trace


class _NonFinite(Exception):
    def __init__(self, iteration: int):
        super().__init__(iteration)
        self.iteration = iteration


RESEED_OFFSET = 1_000_003


def synthesize(exemplar: MultispectralImage, cfg: SynthesisConfig, model: StyleModel,
               projector: Projector | None = None,
               palette: PaletteImage | None = None) -> tuple[MultispectralImage, SynthesisTrace]:
    """Synthesise a new texture from ``exemplar`` by minimising the configured objective.

    A non-finite loss triggers one restart from a re-seeded initialisation;
    a second failure raises :class:`SynthesisError` naming the iteration.
    """
    if min(exemplar.height, exemplar.width) < MIN_EXEMPLAR_SIZE:
        raise SynthesisError(f"exemplar must be at least {MIN_EXEMPLAR_SIZE}x{MIN_EXEMPLAR_SIZE}")
    seed = cfg.rng_seed
    for attempt in range(2):
        try:
            data, trace = _run(exemplar, cfg, model, projector, palette, seed)
            break
        except _NonFinite as exc:
            if attempt == 1:
                raise SynthesisError(
                    f"non-finite loss at iteration {exc.iteration} (seed {seed}) after one re-seeded retry"
                ) from None
            log.warning("non-finite loss at iteration %d; retrying with a new seed", exc.iteration)
            seed = seed + RESEED_OFFSET
    out = MultispectralImage(data, exemplar.band_labels, source_id=f"{exemplar.source_id}-{cfg.objective}")
    return out, trace


def synthesize_rgb_baseline(exemplar3: MultispectralImage, cfg: SynthesisConfig,
                            model: StyleModel) -> tuple[MultispectralImage, SynthesisTrace]:
    """Plain three-band synthesis (the RGB baseline)."""
    if exemplar3.num_bands != 3:
        raise SynthesisError(f"RGB baseline needs a 3-band exemplar, got {exemplar3.num_bands}")
    cfg = SynthesisConfig(**{**cfg.to_dict(), "objective": "rgb_plain"})
    return synthesize(exemplar3, cfg, model)
