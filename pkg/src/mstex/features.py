"""VGG19-family feature extractor and second-order feature statistics.

Weights come from a file when available:

* ``.npz`` archives written by :func:`save_weights` (keys ``conv{k}.weight`` /
  ``conv{k}.bias`` with 1-based conv indices, plus a ``__manifest__`` JSON
  string listing layer names, shapes and preprocessing constants);
* torchvision ``vgg19`` state dicts (``.pth``), keys ``features.{i}.weight``.

Without a weights file the network is initialised from a seeded generator,
which is enough for tests and desk-scale runs but does not reproduce
published metric values.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

WEIGHTS_FORMAT_VERSION = 1

# Convolutions per resolution level and their widths in stock VGG19.
VGG19_BLOCKS = (2, 2, 4, 4, 4)
VGG19_WIDTHS = (64, 128, 256, 512, 512)

ARCHITECTURES = {
    "vgg19": {"blocks": VGG19_BLOCKS, "width_scale": 1.0},
    # One conv per level at 1/8 width; keeps the VGG19 level structure but is
    # cheap enough for CPU tests and desk-scale experiments.
    "vgg19-compact": {"blocks": (1, 1, 1, 1, 1), "width_scale": 0.125},
}

MIN_INPUT_SIZE = 32


@dataclass(frozen=True)
class Preprocessing:
    """Maps [0, 1] RGB input to the range the weights were trained on.

    ``y = (x * scale - mean) / std`` per channel, with the channel order
    reversed first when ``bgr`` is set. Defaults are the torchvision ImageNet
    constants; Caffe-style weights use ``scale=255``, ``bgr=True`` and
    ``mean=(103.939, 116.779, 123.68)``, ``std=(1, 1, 1)``.
    """

    scale: float = 1.0
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    bgr: bool = False


CAFFE_PREPROCESSING = Preprocessing(
    scale=255.0, mean=(103.939, 116.779, 123.68), std=(1.0, 1.0, 1.0), bgr=True
)


@dataclass(frozen=True)
class ExtractorConfig:
    arch: str = "vgg19"
    tap_layers: tuple[int, ...] | None = None
    pooling: str = "max"
    weights: str | None = None
    init_seed: int = 0
    dtype: str = "float32"
    preprocessing: Preprocessing = field(default_factory=Preprocessing)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractorConfig":
        d = dict(d)
        if "preprocessing" in d and isinstance(d["preprocessing"], dict):
            p = dict(d["preprocessing"])
            for key in ("mean", "std"):
                if key in p:
                    p[key] = tuple(p[key])
            d["preprocessing"] = Preprocessing(**p)
        if d.get("tap_layers") is not None:
            d["tap_layers"] = tuple(int(i) for i in d["tap_layers"])
        return cls(**d)


def _dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


def level_first_convs(blocks: Sequence[int]) -> tuple[int, ...]:
    """1-based indices of the first convolution at each resolution level."""
    out, k = [], 1
    for n in blocks:
        out.append(k)
        k += n
    return tuple(out)


def conv_names(blocks: Sequence[int]) -> list[str]:
    return [f"conv{b + 1}_{i + 1}" for b, n in enumerate(blocks) for i in range(n)]


class FeatureExtractor(nn.Module):
    """Truncated VGG19-style network returning post-ReLU activations at tap layers.

    Tap layers are 1-based convolution indices; the network stops after the
    deepest one. Parameters never require gradients, so gradients flow to the
    input only.
    """

    def __init__(self, config: ExtractorConfig = ExtractorConfig()):
        super().__init__()
        if config.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {config.arch!r}; choose from {sorted(ARCHITECTURES)}")
        if config.pooling not in ("max", "avg"):
            raise ValueError(f"pooling must be 'max' or 'avg', got {config.pooling!r}")
        arch = ARCHITECTURES[config.arch]
        self.blocks = tuple(arch["blocks"])
        widths = [max(4, int(round(w * arch["width_scale"]))) for w in VGG19_WIDTHS]
        taps = config.tap_layers or level_first_convs(self.blocks)
        n_convs = sum(self.blocks)
        if sorted(set(taps)) != list(taps) or taps[0] < 1 or taps[-1] > n_convs:
            raise ValueError(f"tap layers must be increasing indices in [1, {n_convs}], got {taps}")
        self.config = replace(config, tap_layers=tuple(taps))
        self.tap_layers = tuple(taps)
        self.names = conv_names(self.blocks)[: taps[-1]]

        convs, pools_after = [], set()
        c_in, k = 3, 0
        for level, n in enumerate(self.blocks):
            for _ in range(n):
                if k < taps[-1]:
                    convs.append(nn.Conv2d(c_in, widths[level], 3, padding=1))
                c_in = widths[level]
                k += 1
            pools_after.add(k)
        self.convs = nn.ModuleList(convs)
        self._pools_after = pools_after
        self.to(_dtype(config.dtype))

        if config.weights:
            self._load_weights(Path(config.weights))
        else:
            log.info("no weights file given; using seeded random initialisation (seed %d)", config.init_seed)
            self._random_init(config.init_seed)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

        pp = self.config.preprocessing
        dt = _dtype(config.dtype)
        self.register_buffer("_pp_mean", torch.tensor(pp.mean, dtype=dt).view(1, 3, 1, 1))
        self.register_buffer("_pp_std", torch.tensor(pp.std, dtype=dt).view(1, 3, 1, 1))

    @property
    def dtype(self) -> torch.dtype:
        return _dtype(self.config.dtype)

    @property
    def channels(self) -> tuple[int, ...]:
        """Number of feature maps at each tap layer."""
        return tuple(self.convs[k - 1].out_channels for k in self.tap_layers)

    def _random_init(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * 9
                w = torch.randn(conv.weight.shape, generator=gen, dtype=torch.float64)
                conv.weight.copy_(w * np.sqrt(2.0 / fan_in))
                conv.bias.zero_()

    def _load_weights(self, path: Path) -> None:
        if not path.exists():
            raise FileNotFoundError(path)
        if path.suffix == ".npz":
            with np.load(path, allow_pickle=False) as z:
                manifest = json.loads(str(z["__manifest__"]))
                if manifest.get("format_version") != WEIGHTS_FORMAT_VERSION:
                    raise ValueError(f"{path}: unsupported weights format {manifest.get('format_version')}")
                tensors = {k: np.array(z[k]) for k in z.files if k != "__manifest__"}
        else:
            state = torch.load(path, map_location="cpu", weights_only=True)
            tensors = _from_torchvision(state, self.blocks)
        with torch.no_grad():
            for k, conv in enumerate(self.convs, start=1):
                w, b = tensors.get(f"conv{k}.weight"), tensors.get(f"conv{k}.bias")
                if w is None or b is None:
                    raise ValueError(f"{path}: missing weights for conv{k}")
                if tuple(w.shape) != tuple(conv.weight.shape):
                    raise ValueError(f"{path}: conv{k} has shape {tuple(w.shape)}, expected {tuple(conv.weight.shape)}")
                conv.weight.copy_(torch.as_tensor(w))
                conv.bias.copy_(torch.as_tensor(b))

    def preprocess(self, x: torch.Tensor) -> torch.Tensor:
        pp = self.config.preprocessing
        if pp.bgr:
            x = x.flip(1)
        return (x * pp.scale - self._pp_mean) / self._pp_std

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Activations for an N x 3 x H x W batch, one tensor per tap layer."""
        x = self.preprocess(x)
        out, taps = [], set(self.tap_layers)
        pool = nn.functional.max_pool2d if self.config.pooling == "max" else nn.functional.avg_pool2d
        for k, conv in enumerate(self.convs, start=1):
            x = torch.relu(conv(x))
            if k in taps:
                out.append(x)
            if k == self.tap_layers[-1]:
                break
            if k in self._pools_after:
                x = pool(x, 2)
        return out


def _from_torchvision(state: dict, blocks: Sequence[int]) -> dict[str, np.ndarray]:
    """Rename torchvision VGG keys to ``conv{k}`` keys.

    Accepts a whole-model state dict (``features.0.weight``) or one saved from
    the ``features`` submodule alone (``0.weight``).
    """
    state = {key.removeprefix("features."): v for key, v in state.items()}
    out, k, idx = {}, 1, 0
    for n in blocks:
        for _ in range(n):
            for part in ("weight", "bias"):
                key = f"{idx}.{part}"
                if key in state:
                    out[f"conv{k}.{part}"] = state[key].numpy()
            idx += 2
            k += 1
        idx += 1
    return out


def save_weights(extractor: FeatureExtractor, path) -> Path:
    """Write the extractor's weights and manifest as an ``.npz`` archive."""
    path = Path(path)
    arrays, layers = {}, []
    for k, (name, conv) in enumerate(zip(extractor.names, extractor.convs), start=1):
        arrays[f"conv{k}.weight"] = conv.weight.detach().cpu().numpy()
        arrays[f"conv{k}.bias"] = conv.bias.detach().cpu().numpy()
        layers.append({"index": k, "name": name, "weight_shape": list(conv.weight.shape)})
    manifest = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "arch": extractor.config.arch,
        "layers": layers,
        "preprocessing": asdict(extractor.config.preprocessing),
    }
    np.savez(path, __manifest__=np.array(json.dumps(manifest)), **arrays)
    return path


def to_nchw(img, dtype: torch.dtype) -> torch.Tensor:
    """H x W x C (or B x H x W x C) array/tensor to B x C x H x W."""
    t = torch.as_tensor(img)
    if t.dtype != dtype:
        t = t.to(dtype)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2)


def extract(extractor: FeatureExtractor, img3) -> list[torch.Tensor]:
    """Activations of an H x W x 3 image as a list of N_l x M_l matrices.

    Differentiable with respect to ``img3`` when it is a tensor that requires
    grad. A leading batch axis is allowed; matrices then get shape B x N_l x M_l.
    """
    t = torch.as_tensor(img3)
    batched = t.ndim == 4
    if t.shape[-1] != 3:
        raise ValueError(f"extractor expects 3 channels, got {t.shape[-1]}")
    if min(t.shape[-3], t.shape[-2]) < MIN_INPUT_SIZE:
        raise ValueError(f"image {tuple(t.shape[-3:-1])} smaller than {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}")
    acts = extractor(to_nchw(t, extractor.dtype))
    acts = [a.flatten(2) for a in acts]
    return acts if batched else [a[0] for a in acts]


def covariance_stats(acts: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Centred second moments (1/M) (F - mean)(F - mean)^T per layer."""
    out = []
    for f in acts:
        fc = f - f.mean(dim=-1, keepdim=True)
        out.append(fc @ fc.transpose(-1, -2) / f.shape[-1])
    return out


def gram_stats(acts: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Uncentred Gram matrices F F^T / M per layer."""
    return [f @ f.transpose(-1, -2) / f.shape[-1] for f in acts]


STATISTICS = {"covariance": covariance_stats, "gram": gram_stats}
