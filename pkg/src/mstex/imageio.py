"""Multispectral image containers, band selection, file I/O and pooled previews.

Two on-disk formats are supported for multiband stacks:

* multiband TIFF (``.tif`` / ``.tiff``), band labels kept as JSON in the
  image description;
* a raw little-endian array (any other suffix) next to a JSON sidecar
  ``<stem>.json`` holding ``{"bands": [...], "shape": [H, W, N], "dtype": "<f8"}``.

Integer data are Sentinel-2 style digital numbers and are divided by
:data:`REFLECTANCE_SCALE` on ingest; float data are taken as reflectance.
Both are clipped to [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import tifffile
from PIL import Image

REFLECTANCE_SCALE = 10000.0
MIN_SIZE = 32

# 11 usable Sentinel-2 bands (B10 at 1375 nm dropped).
SENTINEL2_BANDS = ("B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B9", "B11", "B12")
# Atmospheric-correction bands near 442 nm and 945 nm.
SENTINEL2_CORRECTION_BANDS = ("B1", "B9")
# Pooling used for three-channel previews of 11-band stacks.
SENTINEL2_POOLING = (("B1", "B2", "B3", "B4"), ("B5", "B6", "B7", "B8"), ("B9", "B11", "B12"))


class ImageFormatError(ValueError):
    """Raised when an image file or array violates the container rules."""


@dataclass(frozen=True)
class MultispectralImage:
    """H x W x N reflectance stack with one label per band."""

    data: np.ndarray
    band_labels: tuple[str, ...] = ()
    source_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ImageFormatError(f"expected an H x W x N array, got shape {data.shape}")
        h, w, n = data.shape
        if n < 1 or h < MIN_SIZE or w < MIN_SIZE:
            raise ImageFormatError(
                f"image must be at least {MIN_SIZE}x{MIN_SIZE} with one band, got {data.shape}"
            )
        _check_finite(data)
        labels = tuple(str(b) for b in self.band_labels) or default_labels(n)
        if len(labels) != n:
            raise ImageFormatError(f"{len(labels)} band labels for {n} bands")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "band_labels", labels)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def num_bands(self) -> int:
        return self.data.shape[2]

    def pixels(self) -> np.ndarray:
        """Pixel spectra as an (H*W) x N matrix."""
        return self.data.reshape(-1, self.num_bands)

    def with_data(self, data: np.ndarray, source_id: str | None = None) -> "MultispectralImage":
        return MultispectralImage(
            data, self.band_labels, self.source_id if source_id is None else source_id
        )


@dataclass(frozen=True)
class PaletteImage:
    """Three-channel natural image in [0, 1], used as a colour palette."""

    data: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ImageFormatError(f"palette must be H x W x 3, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ImageFormatError("palette contains non-finite values")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class BandSelection:
    """Ordered, duplicate-free list of band positions (0-based)."""

    indices: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise ValueError("band selection is empty")
        if len(set(idx)) != len(idx):
            raise ValueError(f"duplicate band indices in {idx}")
        object.__setattr__(self, "indices", idx)

    def validate(self, num_bands: int) -> None:
        bad = [i for i in self.indices if not 0 <= i < num_bands]
        if bad:
            raise ValueError(f"band indices {bad} out of range for {num_bands} bands")

    def compose(self, inner: "BandSelection") -> "BandSelection":
        """Selection equivalent to applying ``self`` then ``inner``."""
        inner.validate(len(self.indices))
        return BandSelection(tuple(self.indices[i] for i in inner.indices))

    @classmethod
    def from_labels(cls, img: MultispectralImage, labels: Sequence[str]) -> "BandSelection":
        lookup = {b: i for i, b in enumerate(img.band_labels)}
        missing = [b for b in labels if b not in lookup]
        if missing:
            raise ValueError(f"unknown band labels {missing}; image has {list(img.band_labels)}")
        return cls(tuple(lookup[b] for b in labels))


def default_labels(n: int) -> tuple[str, ...]:
    return tuple(f"band_{i + 1}" for i in range(n))


def sentinel2_nine_band_selection() -> BandSelection:
    """The 9 proper observation bands of an 11-band Sentinel-2 stack."""
    keep = [i for i, b in enumerate(SENTINEL2_BANDS) if b not in SENTINEL2_CORRECTION_BANDS]
    return BandSelection(tuple(keep))


def _check_finite(data: np.ndarray) -> None:
    if np.issubdtype(data.dtype, np.floating):
        bad = ~np.isfinite(data)
        if bad.any():
            band = int(np.argwhere(bad.any(axis=(0, 1)))[0, 0])
            raise ImageFormatError(f"non-finite value in band {band}")


def normalize_reflectance(data: np.ndarray) -> np.ndarray:
    """Map raw file values to reflectance in [0, 1] (float64)."""
    if np.issubdtype(data.dtype, np.integer):
        out = data.astype(np.float64) / REFLECTANCE_SCALE
    else:
        out = data.astype(np.float64)
    _check_finite(out)
    return np.clip(out, 0.0, 1.0)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def _is_tiff(path: Path) -> bool:
    return path.suffix.lower() in (".tif", ".tiff")


def load_multispectral(path, expected_bands: int | None = None) -> MultispectralImage:
    """Read a multiband TIFF or raw stack and normalise it to reflectance.

    Raises:
        FileNotFoundError: the file (or its raw sidecar) does not exist.
        ImageFormatError: band count differs from ``expected_bands`` or the
            data hold NaN/inf (the message names the band).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    labels: Sequence[str] = ()
    if _is_tiff(path):
        with tifffile.TiffFile(path) as tif:
            raw = tif.asarray()
            meta = tif.shaped_metadata[0] if tif.shaped_metadata else {}
        labels = meta.get("bands", ())
        if raw.ndim == 3 and meta.get("layout") != "HWN" and raw.shape[0] < raw.shape[2]:
            # band-first GeoTIFF stacks
            raw = np.moveaxis(raw, 0, -1)
    else:
        side = _sidecar(path)
        if not side.exists():
            raise FileNotFoundError(f"missing sidecar {side}")
        header = json.loads(side.read_text())
        shape = tuple(header["shape"])
        raw = np.fromfile(path, dtype=np.dtype(header["dtype"]))
        if raw.size != int(np.prod(shape)):
            raise ImageFormatError(f"{path}: {raw.size} values for declared shape {shape}")
        raw = raw.reshape(shape)
        labels = header.get("bands", ())
    if raw.ndim == 2:
        raw = raw[:, :, None]
    if expected_bands is not None and raw.shape[2] != expected_bands:
        raise ImageFormatError(f"{path}: expected {expected_bands} bands, found {raw.shape[2]}")
    try:
        data = normalize_reflectance(raw)
    except ImageFormatError as exc:
        raise ImageFormatError(f"{path}: {exc}") from None
    return MultispectralImage(data, tuple(labels), source_id=path.stem)


def export_multispectral(img: MultispectralImage, path) -> Path:
    """Write ``img`` clipped to [0, 1]; the dtype of the array is preserved."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(img.data, 0.0, 1.0)
    if not np.issubdtype(data.dtype, np.floating):
        data = data.astype(np.float64)
    if _is_tiff(path):
        single = data.shape[2] == 1
        tifffile.imwrite(
            path,
            data[:, :, 0] if single else data,
            photometric="minisblack",
            planarconfig=None if single else "contig",
            metadata={"bands": list(img.band_labels), "layout": "HWN"},
        )
    else:
        data = np.ascontiguousarray(data, dtype=data.dtype.newbyteorder("<"))
        data.tofile(path)
        header = {"bands": list(img.band_labels), "shape": list(data.shape), "dtype": data.dtype.str}
        _sidecar(path).write_text(json.dumps(header))
    return path


def select_bands(img: MultispectralImage, sel: BandSelection) -> MultispectralImage:
    sel.validate(img.num_bands)
    idx = list(sel.indices)
    return MultispectralImage(
        img.data[:, :, idx], tuple(img.band_labels[i] for i in idx), img.source_id
    )


def _rescale01(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def pooled_visualization(img: MultispectralImage, pooling: Sequence[Sequence[int]]) -> PaletteImage:
    """Average band groups into three channels and rescale each channel to [0, 1].

    ``pooling`` holds three groups of 0-based band indices.
    """
    if len(pooling) != 3:
        raise ValueError(f"need 3 band groups, got {len(pooling)}")
    channels = []
    for group in pooling:
        group = list(group)
        if not group:
            raise ValueError("empty band group")
        BandSelection(tuple(group)).validate(img.num_bands)
        channels.append(_rescale01(img.data[:, :, group].mean(axis=2)))
    return PaletteImage(np.stack(channels, axis=2), source_id=img.source_id)


def pooling_from_labels(img: MultispectralImage, groups: Sequence[Sequence[str]]) -> list[list[int]]:
    return [list(BandSelection.from_labels(img, g).indices) for g in groups]


def default_pooling(img: MultispectralImage) -> list[list[int]]:
    """Sentinel-2 pooling when the labels allow it, else three contiguous groups."""
    if set(SENTINEL2_BANDS) <= set(img.band_labels):
        return pooling_from_labels(img, SENTINEL2_POOLING)
    n = img.num_bands
    if n < 3:
        return [list(range(n))] * 3
    return [list(g) for g in np.array_split(np.arange(n), 3)]


def load_palette(path) -> PaletteImage:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"):
        with Image.open(path) as im:
            data = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return PaletteImage(data, source_id=path.stem)
    ms = load_multispectral(path, expected_bands=3)
    return PaletteImage(ms.data, source_id=path.stem)


def export_png(img: PaletteImage, path) -> Path:
    """Save as 8-bit RGB PNG (values clipped to [0, 1])."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return path
