import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from ctxseg.data import (DatasetHandle, ImageSample, ShiftSpec, load_dataset, preprocess,
                         save_dataset, split_dataset, synth_domain)
from ctxseg.errors import DataError


def cdf_oracle(image, bins=256):
    """Rank-based equalization: count pixels whose bin is <= each pixel's bin."""
    flat = np.asarray(image, dtype=np.float64).ravel()
    b = np.minimum((np.clip(flat, 0, 1) * bins).astype(int), bins - 1)
    sorted_bins = np.sort(b)
    counts = np.searchsorted(sorted_bins, b, side="right")
    c_min = np.searchsorted(sorted_bins, sorted_bins[0], side="right")
    n = flat.size
    if c_min == n:
        return flat.reshape(image.shape)
    return ((counts - c_min) / (n - c_min)).reshape(image.shape)


def _write_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


@pytest.fixture
def png_dir(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("c", "a", "b"):
        _write_png(tmp_path / "dom" / "images" / f"{name}.png", rng.integers(0, 256, (40, 30), dtype=np.uint8))
        mask = np.zeros((40, 30), np.uint8)
        mask[10:30, 5:20] = 255
        _write_png(tmp_path / "dom" / "masks" / f"{name}.png", mask)
        _write_png(tmp_path / "nomask" / "images" / f"{name}.png", rng.integers(0, 256, (40, 30), dtype=np.uint8))
    return tmp_path


class TestLoad:
    def test_pairs(self, png_dir):
        ds = load_dataset(png_dir, "dom", size=32)
        assert len(ds) == 3
        assert all(s.has_mask for s in ds)
        assert ds.ids == ["a", "b", "c"]
        s = ds[0]
        assert s.image.shape == (32, 32) and s.mask.shape == (32, 32)
        assert 0 <= s.image.min() and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0, 1}

    def test_images_only(self, png_dir):
        ds = load_dataset(png_dir, "nomask", size=32)
        assert len(ds) == 3
        assert not any(s.has_mask for s in ds)

    def test_deterministic(self, png_dir):
        assert load_dataset(png_dir, "dom", size=32).samples == load_dataset(png_dir, "dom", size=32).samples

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path, "nothing")

    def test_dimension_mismatch_names_file(self, png_dir):
        _write_png(png_dir / "dom" / "masks" / "b.png", np.zeros((10, 10), np.uint8))
        with pytest.raises(DataError, match="b.png"):
            load_dataset(png_dir, "dom", size=32)

    def test_unreadable(self, png_dir):
        (png_dir / "dom" / "images" / "d.png").write_bytes(b"not a png")
        with pytest.raises(DataError):
            load_dataset(png_dir, "dom", size=32)

    def test_sixteen_bit(self, tmp_path):
        arr = np.array([[0, 65535], [32768, 1000]], dtype=np.uint16)
        _write_png(tmp_path / "d" / "images" / "x.png", arr)
        ds = load_dataset(tmp_path, "d", size=2)
        np.testing.assert_allclose(ds[0].image, arr / 65535.0, rtol=0, atol=1e-7)

    def test_round_trip(self, png_dir, tmp_path):
        first = load_dataset(png_dir, "dom", size=32)
        out = tmp_path / "out"
        save_dataset(first, out)
        second = load_dataset(out, "dom", size=32)
        save_dataset(second, tmp_path / "out2")
        third = load_dataset(tmp_path / "out2", "dom", size=32)
        assert second.samples == third.samples
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.mask, b.mask)
            np.testing.assert_allclose(a.image, b.image, atol=1 / 65535)


class TestHandle:
    def test_order_is_lexicographic(self):
        samples = [ImageSample(i, "d", np.zeros((4, 4))) for i in ("z", "m", "a")]
        assert DatasetHandle("d", tuple(samples)).ids == ["a", "m", "z"]

    def test_duplicate_ids_rejected(self):
        samples = [ImageSample("a", "d", np.zeros((4, 4)))] * 2
        with pytest.raises(DataError):
            DatasetHandle("d", tuple(samples))

    def test_domain_must_match(self):
        with pytest.raises(DataError):
            DatasetHandle("d", (ImageSample("a", "other", np.zeros((4, 4))),))

    def test_non_binary_mask_rejected(self):
        with pytest.raises(DataError):
            ImageSample("a", "d", np.zeros((4, 4)), np.full((4, 4), 2))

    def test_immutable_arrays(self):
        s = ImageSample("a", "d", np.zeros((4, 4)))
        with pytest.raises(ValueError):
            s.image[0, 0] = 1

    def test_split(self):
        ds = synth_domain(5, seed=0, size=32)
        train, test = split_dataset(ds, 3)
        assert train.ids == ds.ids[:3] and test.ids == ds.ids[3:]
        assert test.split == "test"


class TestPreprocess:
    def test_constant(self):
        img = np.full((16, 16), 0.37, np.float32)
        np.testing.assert_array_equal(preprocess(img), img)

    def test_uniform_is_near_identity(self):
        img = np.random.default_rng(3).uniform(0, 1, (256, 256))
        out = preprocess(img)
        np.testing.assert_allclose(out, cdf_oracle(img), atol=1e-6)
        assert np.abs(out - img).max() <= 0.02

    def test_matches_oracle_on_skewed_image(self):
        img = np.random.default_rng(4).beta(2, 8, (64, 64))
        np.testing.assert_allclose(preprocess(img), cdf_oracle(img), atol=1e-6)

    def test_idempotent(self):
        ds = synth_domain(3, seed=5, size=256)
        for s in ds:
            once = preprocess(s.image)
            assert np.abs(preprocess(once) - once).max() <= 0.02

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (12, 12), elements=st.floats(0, 1)))
    def test_contract(self, img):
        out = preprocess(img)
        assert out.min() >= 0 and out.max() <= 1
        order = np.argsort(img.ravel(), kind="stable")
        assert np.all(np.diff(out.ravel()[order]) >= 0)


class TestSynth:
    def test_deterministic(self):
        a = synth_domain(10, ShiftSpec(), seed=7, size=64)
        b = synth_domain(10, ShiftSpec(), seed=7, size=64)
        assert a.samples == b.samples

    def test_gamma_darkens(self):
        base = synth_domain(6, ShiftSpec(), seed=11, size=64)
        dark = synth_domain(6, ShiftSpec(gamma=2.5), seed=11, size=64)
        for a, b in zip(base, dark):
            assert b.image.mean() < a.image.mean()

    def test_masks_unchanged_without_deformation(self):
        shift = ShiftSpec(gamma=2.2, invert=True, noise_sigma=0.05, bias_amplitude=0.3)
        base = synth_domain(6, ShiftSpec(), seed=2, size=64)
        shifted = synth_domain(6, shift, seed=2, size=64)
        for a, b in zip(base, shifted):
            np.testing.assert_array_equal(a.mask, b.mask)
            assert not np.array_equal(a.image, b.image)

    def test_deformation_moves_masks(self):
        base = synth_domain(3, ShiftSpec(), seed=2, size=64)
        warped = synth_domain(3, ShiftSpec(deform_magnitude=4), seed=2, size=64)
        assert any(not np.array_equal(a.mask, b.mask) for a, b in zip(base, warped))

    def test_identity_shift(self):
        assert ShiftSpec().is_identity
        with pytest.raises(ValueError):
            ShiftSpec(gamma=0)

    @pytest.mark.parametrize("seed", range(5))
    def test_masks_have_both_classes(self, seed):
        for s in synth_domain(8, ShiftSpec(deform_magnitude=4), seed=seed, size=64):
            assert 0 < s.mask.sum() < s.mask.size
            assert 0 <= s.image.min() and s.image.max() <= 1
