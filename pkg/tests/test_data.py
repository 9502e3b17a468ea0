import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from auxseg import (AugmentationConfig, Sample, SyntheticDataConfig, augment,
                    generate_synthetic, load_directory, save_dataset, split)

from helpers import quiet_aug


class TestGenerateSynthetic:
    def test_same_seed_bit_identical(self):
        cfg = SyntheticDataConfig(count=10, height=32, width=32, seed=7)
        a = generate_synthetic(cfg)
        b = generate_synthetic(cfg)
        assert len(a) == len(b) == 10
        for sa, sb in zip(a, b):
            assert sa.id == sb.id
            assert sa.image.tobytes() == sb.image.tobytes()
            assert sa.mask.tobytes() == sb.mask.tobytes()

    def test_noise_free_foreground_above_background_mean(self):
        cfg = SyntheticDataConfig(count=8, height=32, width=32, noise_std=0.0, seed=1)
        for s in generate_synthetic(cfg):
            fg = s.image[s.mask == 1]
            bg_mean = s.image[s.mask == 0].mean()
            assert fg.min() > bg_mean

    def test_foreground_fraction_in_bounds(self):
        cfg = SyntheticDataConfig(count=25, height=32, width=32, seed=3)
        for s in generate_synthetic(cfg):
            fraction = s.mask.mean()
            assert 0.0 < fraction < 0.5

    def test_zero_count_errors(self):
        with pytest.raises(ValueError, match="count"):
            SyntheticDataConfig(count=0)


class TestLoadDirectory:
    def test_empty_directory(self, tmp_path):
        assert load_directory(tmp_path) == []

    def test_round_trip_within_one_255th(self, tmp_path):
        cfg = SyntheticDataConfig(count=2, height=16, width=16, seed=9)
        samples = generate_synthetic(cfg)
        save_dataset(samples, tmp_path)
        loaded = load_directory(tmp_path)
        assert [s.id for s in loaded] == [s.id for s in samples]
        for orig, back in zip(samples, loaded):
            assert np.abs(orig.image - back.image).max() <= 1 / 255 + 1e-7
            np.testing.assert_array_equal(orig.mask, back.mask)

    def test_mask_binarization(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        Image.fromarray(np.zeros((1, 3), dtype=np.uint8), "L").save(tmp_path / "images" / "a.png")
        Image.fromarray(np.array([[0, 37, 255]], dtype=np.uint8), "L").save(tmp_path / "masks" / "a.png")
        [sample] = load_directory(tmp_path)
        np.testing.assert_array_equal(sample.mask, [[0, 1, 1]])

    def test_missing_mask_names_stem(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        Image.fromarray(np.zeros((2, 2), dtype=np.uint8), "L").save(tmp_path / "images" / "lonely.png")
        with pytest.raises(FileNotFoundError, match="lonely"):
            load_directory(tmp_path)

    def test_non_grayscale_errors(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        rgb = np.zeros((2, 2, 3), dtype=np.uint8)
        Image.fromarray(rgb, "RGB").save(tmp_path / "images" / "c.png")
        Image.fromarray(np.zeros((2, 2), dtype=np.uint8), "L").save(tmp_path / "masks" / "c.png")
        with pytest.raises(ValueError, match="non-grayscale"):
            load_directory(tmp_path)

    def test_sixteen_bit_png(self, tmp_path):
        (tmp_path / "images").mkdir()
        (tmp_path / "masks").mkdir()
        arr16 = np.array([[0, 32768, 65535]], dtype=np.uint16)
        Image.fromarray(arr16).save(tmp_path / "images" / "d.png")
        Image.fromarray(np.array([[0, 0, 1]], dtype=np.uint8), "L").save(tmp_path / "masks" / "d.png")
        [sample] = load_directory(tmp_path)
        assert sample.image[0, 0] == 0.0
        assert sample.image[0, 2] == pytest.approx(1.0)

    def test_missing_root_errors(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_directory(tmp_path / "nope")


def _dummy_samples(n):
    image = np.zeros((8, 8), dtype=np.float32)
    mask = np.zeros((8, 8), dtype=np.uint8)
    return [Sample(image=image, mask=mask, id=f"s{i:04d}") for i in range(n)]


class TestSplit:
    def test_sizes_follow_rounding_rule(self):
        # nearest (ties up) for val/test, remainder to train:
        # 2669 @ (0.6, 0.1, 0.3) -> val=round(266.9)=267, test=round(800.7)=801, train=1601.
        splits = split(_dummy_samples(2669), (0.6, 0.1, 0.3), seed=0)
        assert (len(splits.train), len(splits.val), len(splits.test)) == (1601, 267, 801)

    def test_deterministic(self):
        samples = _dummy_samples(50)
        a = split(samples, (0.6, 0.2, 0.2), seed=4)
        b = split(samples, (0.6, 0.2, 0.2), seed=4)
        assert [s.id for s in a.train] == [s.id for s in b.train]
        assert [s.id for s in a.val] == [s.id for s in b.val]
        assert [s.id for s in a.test] == [s.id for s in b.test]

    @given(st.integers(3, 200), st.integers(0, 2 ** 32 - 1))
    def test_partition_property(self, n, seed):
        samples = _dummy_samples(n)
        splits = split(samples, (0.6, 0.2, 0.2), seed=seed)
        ids = [s.id for part in (splits.train, splits.val, splits.test) for s in part]
        assert sorted(ids) == sorted(s.id for s in samples)
        assert len(set(ids)) == len(ids)

    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="at least 3"):
            split(_dummy_samples(2), (0.6, 0.2, 0.2), seed=0)

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            split(_dummy_samples(10), (0.5, 0.2, 0.2), seed=0)


class TestAugment:
    def _sample(self, seed=0, hw=24):
        rng = np.random.default_rng(seed)
        image = rng.random((hw, hw)).astype(np.float32)
        mask = (rng.random((hw, hw)) > 0.6).astype(np.uint8)
        return Sample(image=image, mask=mask, id="aug")

    def test_all_probabilities_zero_is_identity(self):
        s = self._sample()
        out = augment(s, quiet_aug(), np.random.default_rng(0))
        np.testing.assert_array_equal(out.image, s.image)
        np.testing.assert_array_equal(out.mask, s.mask)

    def test_full_turn_rotation_is_near_identity(self):
        from dataclasses import replace

        s = self._sample(1)
        cfg = replace(AugmentationConfig.disabled(), p_rotate=1.0, rotate_deg=(360.0, 360.0))
        out = augment(s, cfg, np.random.default_rng(0))
        assert np.abs(out.image - s.image).mean() < 1e-2

    def test_mask_stays_binary_under_heavy_augmentation(self):
        cfg = AugmentationConfig(p_translate=1, p_zoom=1, p_rotate=1, p_noise=1,
                                 p_blur=1, p_brightness=1, p_contrast=1, p_gamma=1)
        rng = np.random.default_rng(2)
        for seed in range(5):
            out = augment(self._sample(seed), cfg, rng)
            assert set(np.unique(out.mask)) <= {0, 1}
            assert out.image.shape == (24, 24)
            assert out.image.min() >= 0.0 and out.image.max() <= 1.0

    def test_shape_preserved(self):
        cfg = AugmentationConfig(p_translate=1, p_zoom=1, p_rotate=1)
        out = augment(self._sample(3, hw=20), cfg, np.random.default_rng(1))
        assert out.image.shape == (20, 20)
        assert out.mask.shape == (20, 20)

    def test_deterministic_given_rng_state(self):
        s = self._sample(4)
        cfg = AugmentationConfig(p_translate=1, p_zoom=1, p_rotate=1, p_noise=1)
        a = augment(s, cfg, np.random.default_rng(9))
        b = augment(s, cfg, np.random.default_rng(9))
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)

    def test_works_without_mask(self):
        s = Sample(image=np.zeros((16, 16), dtype=np.float32), mask=None, id="nomask")
        cfg = AugmentationConfig(p_rotate=1.0)
        out = augment(s, cfg, np.random.default_rng(0))
        assert out.mask is None


def test_save_dataset_refuses_overwrite(tmp_path):
    samples = generate_synthetic(SyntheticDataConfig(count=2, height=16, width=16, seed=0))
    save_dataset(samples, tmp_path)
    with pytest.raises(FileExistsError, match="refusing"):
        save_dataset(samples, tmp_path)
    save_dataset(samples, tmp_path, force=True)
