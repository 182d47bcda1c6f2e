import json

import numpy as np
import pytest
import tifffile
from hypothesis import given, settings
from hypothesis import strategies as st

from mstex.imageio import (
    SENTINEL2_BANDS,
    BandSelection,
    ImageFormatError,
    MultispectralImage,
    PaletteImage,
    default_pooling,
    export_multispectral,
    export_png,
    load_multispectral,
    load_palette,
    normalize_reflectance,
    pooled_visualization,
    pooling_from_labels,
    select_bands,
    sentinel2_nine_band_selection,
)


def _image(rng, h=32, w=32, n=5, labels=()):
    return MultispectralImage(rng.uniform(0, 1, (h, w, n)), labels, source_id="x")


class TestContainer:
    def test_rejects_small(self, rng):
        with pytest.raises(ImageFormatError):
            MultispectralImage(rng.uniform(size=(31, 40, 2)))

    def test_rejects_nan_naming_band(self, rng):
        data = rng.uniform(size=(32, 32, 4))
        data[3, 5, 2] = np.nan
        with pytest.raises(ImageFormatError, match="band 2"):
            MultispectralImage(data)

    def test_label_count_checked(self, rng):
        with pytest.raises(ImageFormatError):
            MultispectralImage(rng.uniform(size=(32, 32, 3)), ("a", "b"))

    def test_default_labels(self, rng):
        img = _image(rng, n=3)
        assert img.band_labels == ("band_1", "band_2", "band_3")

    def test_palette_needs_three_channels(self, rng):
        with pytest.raises(ImageFormatError):
            PaletteImage(rng.uniform(size=(32, 32, 4)))

    def test_single_band_ok(self, rng, tmp_path):
        path = export_multispectral(_image(rng, 64, 64, 1), tmp_path / "one.tif")
        assert load_multispectral(path).num_bands == 1


class TestIngest:
    def test_integer_digital_numbers_scaled(self):
        raw = np.array([[0, 5000, 10000, 12000]], dtype=np.uint16)
        np.testing.assert_array_equal(normalize_reflectance(raw), [[0.0, 0.5, 1.0, 1.0]])

    def test_band_first_tiff_transposed(self, rng, tmp_path):
        raw = (rng.uniform(size=(11, 40, 48)) * 10000).astype(np.uint16)
        tifffile.imwrite(tmp_path / "s2.tif", raw, photometric="minisblack")
        img = load_multispectral(tmp_path / "s2.tif", expected_bands=11)
        assert (img.height, img.width, img.num_bands) == (40, 48, 11)
        np.testing.assert_allclose(img.data[:, :, 4], raw[4] / 10000.0)

    def test_band_count_mismatch(self, rng, tmp_path):
        path = export_multispectral(_image(rng), tmp_path / "a.tif")
        with pytest.raises(ImageFormatError, match="expected 4"):
            load_multispectral(path, expected_bands=4)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_multispectral(tmp_path / "nope.tif")

    def test_missing_sidecar(self, tmp_path):
        (tmp_path / "a.raw").write_bytes(b"\0" * 8)
        with pytest.raises(FileNotFoundError):
            load_multispectral(tmp_path / "a.raw")

    def test_nan_in_file_names_band(self, rng, tmp_path):
        data = rng.uniform(size=(32, 32, 3))
        data[0, 0, 1] = np.nan
        data.tofile(tmp_path / "bad.raw")
        (tmp_path / "bad.json").write_text(json.dumps({"shape": [32, 32, 3], "dtype": "<f8"}))
        with pytest.raises(ImageFormatError, match="band 1"):
            load_multispectral(tmp_path / "bad.raw")


class TestRoundTrip:
    @pytest.mark.parametrize("suffix", [".tif", ".f64"])
    def test_bit_exact(self, rng, tmp_path, suffix):
        img = _image(rng, 32, 32, 5, labels=("a", "b", "c", "d", "e"))
        back = load_multispectral(export_multispectral(img, tmp_path / f"img{suffix}"))
        np.testing.assert_array_equal(back.data, img.data)
        assert back.band_labels == img.band_labels

    @pytest.mark.parametrize("suffix", [".tif", ".raw"])
    def test_float32_preserved(self, rng, tmp_path, suffix):
        img = MultispectralImage(rng.uniform(size=(32, 32, 2)).astype(np.float32))
        back = load_multispectral(export_multispectral(img, tmp_path / f"img{suffix}"))
        np.testing.assert_array_equal(back.data, img.data.astype(np.float64))

    def test_clipping_on_export(self, rng, tmp_path):
        data = rng.uniform(size=(32, 32, 2))
        data[0, 0, 0], data[1, 1, 1] = 1.2, -0.3
        back = load_multispectral(export_multispectral(MultispectralImage(data), tmp_path / "c.tif"))
        assert back.data[0, 0, 0] == 1.0 and back.data[1, 1, 1] == 0.0

    def test_eleven_band_labels(self, rng, tmp_path):
        img = _image(rng, 32, 32, 11, labels=SENTINEL2_BANDS)
        back = load_multispectral(export_multispectral(img, tmp_path / "s2.tif"))
        assert back.num_bands == 11 and back.band_labels == SENTINEL2_BANDS

    @settings(max_examples=15, deadline=None)
    @given(n=st.integers(1, 6), seed=st.integers(0, 2**32 - 1))
    def test_load_export_identity(self, tmp_path_factory, n, seed):
        rng = np.random.default_rng(seed)
        img = MultispectralImage(np.clip(rng.normal(0.5, 0.4, (32, 33, n)), 0, 1))
        path = tmp_path_factory.mktemp("rt") / "x.tif"
        np.testing.assert_array_equal(load_multispectral(export_multispectral(img, path)).data, img.data)


class TestSelection:
    def test_nine_band(self, rng):
        img = _image(rng, n=11, labels=SENTINEL2_BANDS)
        nine = select_bands(img, sentinel2_nine_band_selection())
        assert nine.num_bands == 9
        assert "B1" not in nine.band_labels and "B9" not in nine.band_labels

    def test_identity(self, rng):
        img = _image(rng, n=4)
        out = select_bands(img, BandSelection((0, 1, 2, 3)))
        np.testing.assert_array_equal(out.data, img.data)

    def test_rgb_like(self, rng):
        img = _image(rng, n=11)
        out = select_bands(img, BandSelection((1, 2, 3)))
        np.testing.assert_array_equal(out.data, img.data[:, :, 1:4])

    def test_invalid(self, rng):
        with pytest.raises(ValueError):
            BandSelection((0, 0))
        with pytest.raises(ValueError):
            select_bands(_image(rng, n=3), BandSelection((0, 3)))

    @given(st.permutations(range(6)), st.data())
    def test_composition(self, perm, data):
        img = MultispectralImage(np.random.default_rng(0).uniform(size=(32, 32, 6)))
        outer = BandSelection(tuple(perm[: data.draw(st.integers(1, 6))]))
        k = len(outer.indices)
        inner = BandSelection(tuple(data.draw(st.permutations(range(k)))[: data.draw(st.integers(1, k))]))
        twice = select_bands(select_bands(img, outer), inner)
        once = select_bands(img, outer.compose(inner))
        np.testing.assert_array_equal(twice.data, once.data)


class TestPooledVisualization:
    def test_sentinel_groups(self, rng):
        img = _image(rng, n=11, labels=SENTINEL2_BANDS)
        pooling = pooling_from_labels(img, [["B1", "B2", "B3", "B4"], ["B5", "B6", "B7", "B8"], ["B9", "B11", "B12"]])
        assert pooling == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10]]
        assert default_pooling(img) == pooling
        out = pooled_visualization(img, pooling)
        assert out.data.shape == (32, 32, 3)

    def test_singleton_groups_rescale(self, rng):
        img = _image(rng, n=3)
        out = pooled_visualization(img, [[0], [1], [2]])
        for c in range(3):
            x = img.data[:, :, c]
            np.testing.assert_allclose(out.data[:, :, c], (x - x.min()) / (x.max() - x.min()))

    def test_constant_maps_to_half(self):
        out = pooled_visualization(MultispectralImage(np.full((32, 32, 3), 0.3)), [[0], [1], [2]])
        np.testing.assert_array_equal(out.data, 0.5)

    def test_errors(self, rng):
        img = _image(rng, n=3)
        with pytest.raises(ValueError):
            pooled_visualization(img, [[0], [], [2]])
        with pytest.raises(ValueError):
            pooled_visualization(img, [[0], [1], [5]])

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 1000), scale=st.floats(-3, 3))
    def test_always_unit_range(self, seed, scale):
        data = np.random.default_rng(seed).normal(size=(32, 32, 5)) * scale
        img = MultispectralImage(data)
        out = pooled_visualization(img, default_pooling(img))
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_png_round_trip(self, rng, tmp_path):
        pal = PaletteImage(rng.uniform(size=(32, 32, 3)))
        back = load_palette(export_png(pal, tmp_path / "p.png"))
        np.testing.assert_allclose(back.data, pal.data, atol=0.5 / 255 + 1e-12)
