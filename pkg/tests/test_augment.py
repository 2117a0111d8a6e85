"""Augmentation pipeline: determinism, op semantics, range invariants."""

import numpy as np
import pytest

from c2l.augment import (
    AugmentConfig,
    ImageBatch,
    augment_batch,
    crop_resize,
    cutout,
    grayscale,
    rotate,
)
from c2l.rng import RngStream


def _batch(z=4, h=16, w=16, seed=0):
    rng = np.random.default_rng(seed)
    return ImageBatch(rng.random((z, 1, h, w), dtype=np.float64))


class TestImageBatch:
    def test_accepts_valid_pixels(self):
        b = _batch()
        assert b.z == 4 and b.shape == (4, 1, 16, 16)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError, match=r"\[0,1\]"):
            ImageBatch(np.full((2, 1, 4, 4), 1.5))

    def test_rejects_single_sample(self):
        with pytest.raises(ValueError, match="Z >= 2"):
            ImageBatch(np.zeros((1, 1, 4, 4)))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            ImageBatch(np.zeros((2, 4, 4)))


class TestAugmentConfig:
    def test_defaults_valid(self):
        AugmentConfig()

    def test_bad_crop_scale(self):
        with pytest.raises(ValueError):
            AugmentConfig(crop_scale=(0.0, 1.0))
        with pytest.raises(ValueError):
            AugmentConfig(crop_scale=(0.9, 0.5))

    def test_bad_probability(self):
        with pytest.raises(ValueError):
            AugmentConfig(hflip_prob=1.5)

    def test_bad_cutout_fraction(self):
        with pytest.raises(ValueError):
            AugmentConfig(cutout_size_fraction=1.0)


class TestPipeline:
    def test_disabled_pipeline_is_identity(self):
        b = _batch()
        out = augment_batch(b, RngStream(1, "augment"), AugmentConfig.disabled())
        np.testing.assert_array_equal(out.images, b.images)
        assert out.images is not b.images

    def test_same_key_bitwise_identical(self):
        b = _batch()
        cfg = AugmentConfig()
        o1 = augment_batch(b, RngStream(5, "augment", 3), cfg)
        o2 = augment_batch(b, RngStream(5, "augment", 3), cfg)
        np.testing.assert_array_equal(o1.images, o2.images)

    def test_distinct_iteration_keys_differ(self):
        b = _batch()
        cfg = AugmentConfig()
        o1 = augment_batch(b, RngStream(5, "augment", 0), cfg)
        o2 = augment_batch(b, RngStream(5, "augment", 1), cfg)
        assert (o1.images != o2.images).any()

    def test_output_in_range_and_same_shape(self):
        cfg = AugmentConfig()
        for seed in range(5):
            b = _batch(z=3, seed=seed)
            out = augment_batch(b, RngStream(seed, "p"), cfg)
            assert out.images.shape == b.images.shape
            assert out.images.min() >= 0.0 and out.images.max() <= 1.0

    def test_disabled_op_equals_neutral_op(self):
        """Turning a primitive off must not shift the other ops' draws."""
        b = _batch()
        no_flip = augment_batch(
            b, RngStream(2, "a"), AugmentConfig(hflip_enabled=False))
        prob_zero = augment_batch(
            b, RngStream(2, "a"), AugmentConfig(hflip_prob=0.0))
        np.testing.assert_array_equal(no_flip.images, prob_zero.images)

    def test_identity_crop_matches_disabled_crop(self):
        b = _batch()
        no_crop = augment_batch(
            b, RngStream(3, "a"), AugmentConfig(crop_enabled=False))
        unit_crop = augment_batch(
            b, RngStream(3, "a"), AugmentConfig(crop_scale=(1.0, 1.0)))
        np.testing.assert_allclose(no_crop.images, unit_crop.images, atol=1e-12)


class TestRotate:
    def test_angle_zero_is_identity(self):
        b = _batch()
        out = rotate(b.images, np.zeros(b.z))
        np.testing.assert_array_equal(out, b.images)

    def test_180_twice_restores_symmetric_pattern(self):
        rng = np.random.default_rng(3)
        img = rng.random((1, 9, 9))
        out = rotate(rotate(img, 180.0), 180.0)
        np.testing.assert_allclose(out, img, atol=1e-6)

    def test_rotation_preserves_disc_intensity(self):
        h = w = 32
        yy, xx = np.mgrid[0:h, 0:w]
        disc = (((yy - 15.5) ** 2 + (xx - 15.5) ** 2) < 64).astype(np.float64)
        img = disc[None]
        out = rotate(img, 10.0)
        assert abs(out.sum() - img.sum()) / img.sum() < 0.02

    def test_fill_value_is_zero(self):
        img = np.ones((1, 16, 16))
        out = rotate(img, 45.0)
        assert out.min() == 0.0  # corners rotate out of support


class TestCutout:
    def test_interior_hole_zeroes_exactly_side_squared(self):
        imgs = np.full((2, 1, 16, 16), 0.5)
        out = cutout(imgs, np.array([8, 8]), np.array([8, 8]), 4)
        assert (out == 0).sum() == 2 * 16

    def test_border_hole_is_clipped(self):
        imgs = np.full((2, 1, 16, 16), 0.5)
        out = cutout(imgs, np.array([0, 0]), np.array([0, 15]), 6)
        assert (out[0] == 0).sum() == 3 * 3  # top-left corner
        assert (out[1] == 0).sum() == 3 * 4  # top-right edge

    def test_pixels_outside_hole_unchanged(self):
        rng = np.random.default_rng(0)
        imgs = rng.random((2, 1, 16, 16)) * 0.5 + 0.25  # no zeros
        out = cutout(imgs, np.array([4, 10]), np.array([4, 10]), 4)
        mask = out == 0
        np.testing.assert_array_equal(out[~mask], imgs[~mask])


class TestCropResize:
    def test_full_window_is_identity(self):
        b = _batch()
        z = b.z
        out = crop_resize(b.images, np.zeros(z, dtype=np.intp),
                          np.zeros(z, dtype=np.intp),
                          np.full(z, 16, dtype=np.intp),
                          np.full(z, 16, dtype=np.intp))
        np.testing.assert_allclose(out, b.images, atol=1e-12)

    def test_degenerate_window_errors(self):
        b = _batch()
        z = b.z
        with pytest.raises(ValueError, match="degenerate"):
            crop_resize(b.images, np.zeros(z, dtype=np.intp),
                        np.zeros(z, dtype=np.intp),
                        np.zeros(z, dtype=np.intp),
                        np.full(z, 16, dtype=np.intp))

    def test_constant_image_stays_constant(self):
        imgs = np.full((2, 1, 16, 16), 0.7)
        out = crop_resize(imgs, np.array([2, 3]), np.array([1, 4]),
                          np.array([8, 10]), np.array([8, 10]))
        np.testing.assert_allclose(out, 0.7, atol=1e-12)


class TestGrayscale:
    def test_identity_on_single_channel(self):
        b = _batch()
        assert grayscale(b.images) is b.images

    def test_three_channel_luma(self):
        rng = np.random.default_rng(1)
        imgs = rng.random((2, 3, 8, 8))
        out = grayscale(imgs)
        assert out.shape == imgs.shape
        np.testing.assert_allclose(out[:, 0], out[:, 1])
        expected = 0.299 * imgs[:, 0] + 0.587 * imgs[:, 1] + 0.114 * imgs[:, 2]
        np.testing.assert_allclose(out[:, 0], expected, rtol=1e-12)
