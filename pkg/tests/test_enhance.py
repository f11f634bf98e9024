import numpy as np
import pytest

from cfd2bmode.enhance import (EnhanceConfig, blur_mask, detect_static_fiducials,
                               enhance_coarse, replace_fiducials)
from cfd2bmode.errors import ConfigError, GeometryError


def _neutral(mode="offline"):
    return EnhanceConfig(speckle_sigma=0.0, contrast_offline=1.0, detail_iterations=0,
                         contrast_inference=1.5, mode=mode)


class TestBlurMask:
    def test_zeros_and_ones_fixed_points(self):
        config = EnhanceConfig()
        zeros = np.zeros((2, 64, 64))
        ones = np.ones((2, 64, 64))
        assert float(np.abs(blur_mask(zeros, config)).max()) == 0.0
        np.testing.assert_allclose(blur_mask(ones, config), 1.0, atol=1e-6)

    def test_single_pixel_bump(self):
        config = EnhanceConfig(blur_kernel=25, blur_sigma=3.0)
        mask = np.zeros((101, 101))
        mask[50, 50] = 1.0
        soft = blur_mask(mask, config)
        assert soft.sum() == pytest.approx(1.0, rel=1e-4)  # normalized kernel
        np.testing.assert_allclose(soft, soft[::-1, :], atol=1e-7)  # symmetric
        np.testing.assert_allclose(soft, soft[:, ::-1], atol=1e-7)
        assert soft[50, 50] == soft.max()

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            blur_mask(np.zeros((4, 4)), EnhanceConfig(blur_kernel=24))


class TestEnhanceCoarse:
    def test_neutral_config_identity(self):
        rng = np.random.default_rng(0)
        video = rng.random((3, 32, 32, 3)).astype(np.float32)
        out = enhance_coarse(video, None, _neutral())
        np.testing.assert_allclose(out, video, atol=1e-7)

    def test_inference_with_zero_mask_equals_offline(self):
        rng = np.random.default_rng(1)
        video = rng.random((2, 32, 32, 3)).astype(np.float32)
        config_off = EnhanceConfig(mode="offline")
        config_inf = EnhanceConfig(mode="inference")
        off = enhance_coarse(video, None, config_off, rng=np.random.default_rng(9))
        inf = enhance_coarse(video, np.zeros((2, 32, 32)), config_inf,
                             rng=np.random.default_rng(9))
        np.testing.assert_allclose(inf, off, atol=1e-7)

    def test_uniform_frame_contrast_fixed_point(self):
        video = np.full((1, 16, 16, 3), 0.5, dtype=np.float32)
        config = EnhanceConfig(speckle_sigma=0.0, contrast_offline=1.2,
                               detail_iterations=0)
        out = enhance_coarse(video, None, config)
        np.testing.assert_allclose(out, 0.5, atol=1e-7)

    def test_output_range(self):
        rng = np.random.default_rng(2)
        video = rng.random((2, 32, 32, 3)).astype(np.float32)
        soft = rng.random((2, 32, 32)).astype(np.float32)
        out = enhance_coarse(video, soft, EnhanceConfig(mode="inference"),
                             rng=np.random.default_rng(3))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_masked_pixels_match_offline_path(self):
        rng = np.random.default_rng(4)
        video = rng.random((2, 32, 32, 3)).astype(np.float32)
        soft = np.zeros((2, 32, 32), dtype=np.float32)
        soft[:, 8:16, 8:16] = 1.0
        # With no noise/contrast/detail, the only change is inside the mask.
        config = EnhanceConfig(speckle_sigma=0.0, contrast_offline=1.0,
                               detail_iterations=0, mode="inference")
        out = enhance_coarse(video, soft, config)
        untouched = soft[..., None] == 0.0
        assert np.array_equal(out[np.broadcast_to(untouched, out.shape)],
                              video[np.broadcast_to(untouched, video.shape)])
        assert not np.array_equal(out[:, 8:16, 8:16], video[:, 8:16, 8:16])

    def test_bad_shape(self):
        with pytest.raises(GeometryError):
            enhance_coarse(np.zeros((2, 8, 8)), None, _neutral())

    def test_mode_validation(self):
        with pytest.raises(ConfigError):
            EnhanceConfig(mode="both").validate()


class TestReplaceFiducials:
    def test_empty_and_full_mask(self):
        rng = np.random.default_rng(5)
        synth = rng.random((2, 16, 16, 3)).astype(np.float32)
        real = rng.random((2, 16, 16, 3)).astype(np.float32)
        assert np.array_equal(replace_fiducials(synth, real, np.zeros((16, 16))), synth)
        assert np.array_equal(replace_fiducials(synth, real, np.ones((16, 16))), real)

    def test_glyph_compositing_bit_exact(self):
        rng = np.random.default_rng(6)
        synth = rng.random((2, 16, 16, 3)).astype(np.float32)
        real = rng.random((2, 16, 16, 3)).astype(np.float32)
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[2:5, 3:9] = 1
        out = replace_fiducials(synth, real, mask)
        sel = mask > 0
        assert np.array_equal(out[:, sel], real[:, sel])
        assert np.array_equal(out[:, ~sel], synth[:, ~sel])

    def test_idempotent(self):
        rng = np.random.default_rng(7)
        synth = rng.random((2, 16, 16, 3)).astype(np.float32)
        real = rng.random((2, 16, 16, 3)).astype(np.float32)
        mask = (rng.random((16, 16)) > 0.5).astype(np.uint8)
        once = replace_fiducials(synth, real, mask)
        assert np.array_equal(replace_fiducials(once, real, mask), once)

    def test_shape_mismatch(self):
        with pytest.raises(GeometryError):
            replace_fiducials(np.zeros((2, 16, 16, 3)), np.zeros((2, 16, 16, 3)),
                              np.zeros((8, 8)))


def test_detect_static_fiducials():
    rng = np.random.default_rng(8)
    video = rng.random((5, 32, 32, 3)).astype(np.float32) * 0.3
    video[:, 2:5, 2:8] = 0.9  # static bright glyph
    sector = np.zeros((32, 32), dtype=np.uint8)
    sector[8:, :] = 1  # glyph region outside the sector
    found = detect_static_fiducials(video, sector)
    assert found[3, 4] == 1
    assert found[20, 20] == 0
    assert found.sum() == 18
