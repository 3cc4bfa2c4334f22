from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from django.test import SimpleTestCase
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from instance_rsr.configfile import parse_config
from instance_rsr.degrade import (
    JPEG_LUMINANCE,
    DegradationConfig,
    DegradationFileConfig,
    NoiseSpec,
    add_noise,
    box_kernel,
    compress_artifacts,
    convolve,
    degrade,
    degrade_image,
    downsample,
    gaussian_kernel,
    identity_kernel,
    kernel_side_range,
    quantization_table,
    random_config,
)
from instance_rsr.exceptions import ConfigError, ShapeError
from instance_rsr.synthdata import SceneSpec, generate_scene
from instance_rsr.utils import make_generator
from tests.testapp.utils import random_image


def dct_matrix(n=8):
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    basis = np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    basis[0] *= math.sqrt(1 / n)
    basis[1:] *= math.sqrt(2 / n)
    return basis


def grey_block(levels):
    # levels are 0..255 pixel values of one 8x8 block, repeated on all channels
    return torch.from_numpy(np.repeat(levels[:, :, None] / 255.0, 3, axis=2))


class DegradationConfigTests(SimpleTestCase):
    def test_even_kernel(self):
        with pytest.raises(ShapeError):
            DegradationConfig(kernel=torch.full((2, 2), 0.25, dtype=torch.float64))

    def test_kernel_sum(self):
        with pytest.raises(ConfigError):
            DegradationConfig(kernel=torch.full((3, 3), 0.1, dtype=torch.float64))

    def test_negative_kernel(self):
        kernel = torch.tensor([[-1.0, 1.0, 1.0]], dtype=torch.float64)
        with pytest.raises(ConfigError):
            DegradationConfig(kernel=kernel)

    def test_quality_range(self):
        with pytest.raises(ConfigError):
            DegradationConfig(kernel=identity_kernel(), quality=0)

    def test_noise_kind(self):
        with pytest.raises(ConfigError):
            NoiseSpec(kind="salt")

    def test_indivisible_image(self):
        config = DegradationConfig(kernel=identity_kernel(), scale_1=2, scale_2=2)
        with pytest.raises(ShapeError):
            degrade_image(random_image(10, 10), config)


class IdentityChainTests(SimpleTestCase):
    def test_bit_exact(self):
        config = DegradationConfig(kernel=identity_kernel())
        for seed in range(100):
            x = random_image(16, 16, seed=seed)
            assert torch.equal(degrade_image(x, config), x)


class ConvolveTests(SimpleTestCase):
    def test_matches_scipy_mirror_convolution(self):
        rng = np.random.default_rng(0)
        kernel = rng.uniform(0.1, 1.0, (3, 5))
        kernel /= kernel.sum()
        x = random_image(12, 10, seed=1)
        out = convolve(x, torch.from_numpy(kernel))
        for channel in range(3):
            expected = ndimage.convolve(x[..., channel].numpy(), kernel, mode="mirror")
            np.testing.assert_allclose(out[..., channel].numpy(), expected, atol=1e-12)

    def test_constant_image_unchanged(self):
        x = torch.full((9, 9, 3), 0.3, dtype=torch.float64)
        assert torch.allclose(convolve(x, box_kernel(5)), x, atol=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            convolve(random_image(4, 4), box_kernel(9))


class GaussianKernelTests(SimpleTestCase):
    def test_normalized(self):
        kernel = gaussian_kernel(7, 1.3, 0.6, 0.4)
        assert abs(float(kernel.sum()) - 1.0) <= 1e-12
        assert kernel.shape == (7, 7)

    def test_rotation_swaps_axes(self):
        rotated = gaussian_kernel(9, 1.0, 2.0, math.pi / 2)
        swapped = gaussian_kernel(9, 2.0, 1.0)
        assert torch.allclose(rotated, swapped, atol=1e-12)

    def test_isotropic_is_symmetric(self):
        kernel = gaussian_kernel(7, 1.5)
        assert torch.allclose(kernel, kernel.T)

    def test_even_side(self):
        with pytest.raises(ShapeError):
            gaussian_kernel(6, 1.0)


class DownsampleTests(SimpleTestCase):
    def test_area_composition(self):
        x = random_image(16, 16, seed=2)
        twice = downsample(downsample(x, 2), 2)
        assert torch.allclose(twice, downsample(x, 4), atol=1e-12)

    def test_area_means_blocks(self):
        x = torch.arange(16, dtype=torch.float64).reshape(4, 4, 1).expand(4, 4, 3)
        out = downsample(x, 2)
        assert out[..., 0].tolist() == [[2.5, 4.5], [10.5, 12.5]]

    def test_nearest(self):
        x = random_image(8, 8)
        assert torch.equal(downsample(x, 2, "nearest"), x[::2, ::2])

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            downsample(random_image(6, 6), 4)


class NoiseTests(SimpleTestCase):
    def test_deterministic(self):
        x = random_image(8, 8)
        spec = NoiseSpec(sigma=0.05)
        first = add_noise(x, spec, make_generator(3))
        second = add_noise(x, spec, make_generator(3))
        assert torch.equal(first, second)
        assert not torch.equal(first, x)

    def test_gaussian_std_on_mid_grey(self):
        x = torch.full((64, 64, 3), 0.5, dtype=torch.float64)
        out = add_noise(x, NoiseSpec(sigma=0.1), make_generator(0))
        assert 0.09 <= float((out - x).std()) <= 0.11
        assert abs(float((out - x).mean())) <= 0.005

    def test_poisson_gaussian_in_range(self):
        x = random_image(8, 8)
        out = add_noise(x, NoiseSpec("poisson-gaussian", 0.02), make_generator(0))
        assert float(out.min()) >= 0.0
        assert float(out.max()) <= 1.0


class CompressArtifactsTests(SimpleTestCase):
    def test_none_is_identity(self):
        x = random_image(8, 8)
        assert torch.equal(compress_artifacts(x, None), x)

    def test_quantization_table_at_50(self):
        assert quantization_table(50)[0, 0] == 16.0

    def test_constant_image_keeps_its_mean(self):
        for value in (0.1, 0.37, 0.8):
            x = torch.full((16, 16, 3), value, dtype=torch.float64)
            out = compress_artifacts(x, 50)
            assert abs(float(out.mean()) - value) <= 1 / 255 + 1e-9

    def test_mid_grey_block_by_hand(self):
        # 127.5 - 128 = -0.5, DC = 8 * -0.5 = -4, round(-4 / 16) = 0
        out = compress_artifacts(grey_block(np.full((8, 8), 127.5)), 50)
        assert torch.allclose(out, torch.full_like(out, 128 / 255), atol=1e-12)

    def test_single_coefficient_block_by_hand(self):
        # coefficient (0, 1) of 60 quantizes to round(60 / 11) * 11 = 55
        c = dct_matrix()
        basis = np.outer(c[0], c[1])
        out = compress_artifacts(grey_block(128.0 + 60.0 * basis), 50)
        expected = grey_block(128.0 + 55.0 * basis)
        assert torch.allclose(out, expected, atol=1e-12)

    def test_block_matches_matrix_dct(self):
        levels = np.random.default_rng(5).uniform(40.0, 215.0, (8, 8))
        c = dct_matrix()
        coefficients = c @ (levels - 128.0) @ c.T
        quantized = np.round(coefficients / JPEG_LUMINANCE) * JPEG_LUMINANCE
        expected = np.clip((c.T @ quantized @ c + 128.0) / 255.0, 0.0, 1.0)
        out = compress_artifacts(grey_block(levels), 50)
        assert np.allclose(out[:, :, 1].numpy(), expected, atol=1e-9)

    def test_high_quality_is_close(self):
        x = random_image(16, 16, seed=4)
        low = float((compress_artifacts(x, 30) - x).abs().mean())
        high = float((compress_artifacts(x, 95) - x).abs().mean())
        assert high < low

    def test_odd_size(self):
        x = random_image(10, 13)
        assert compress_artifacts(x, 75).shape == x.shape


class DegradeTests(SimpleTestCase):
    def test_matches_step_composition(self):
        for seed in range(20):
            config = random_config(seed)
            x = random_image(16, 16, seed=seed)
            generator = make_generator(config.seed)
            expected = convolve(x, config.kernel)
            expected = downsample(expected, config.scale_1)
            expected = add_noise(expected, config.noise, generator)
            expected = downsample(expected, config.scale_2)
            expected = compress_artifacts(expected, config.quality).clamp(0, 1)
            out = degrade_image(x, config)
            assert float((out - expected).abs().max()) <= 1e-6

    def test_degrade_sample(self):
        scene = generate_scene(SceneSpec(width=32, height=32, seed=42))
        pair = degrade(scene, random_config(1))
        assert pair.lr.shape == (8, 8, 3)
        assert pair.hr is scene

    def test_deterministic(self):
        x = random_image(16, 16)
        assert torch.equal(
            degrade_image(x, random_config(9)), degrade_image(x, random_config(9))
        )

    @settings(deadline=None, max_examples=25)
    @given(st.integers(0, 2**32))
    def test_random_config_ranges(self, seed):
        config = random_config(seed)
        side = config.kernel.shape[0]
        assert side % 2 == 1 and 7 <= side <= 21
        assert 0.0 <= config.noise.sigma <= 0.05
        assert 30 <= config.quality <= 95

    def test_kernel_side_capped_by_image_size(self):
        x = random_image(16, 16)
        for seed in range(40):
            config = random_config(seed, image_size=16)
            assert config.kernel.shape[0] <= 15
            assert degrade_image(x, config).shape == (4, 4, 3)

    def test_small_image_kernel_range(self):
        assert kernel_side_range(4) == (3, 3)
        assert kernel_side_range(9) == (7, 7)
        with pytest.raises(ShapeError):
            kernel_side_range(1)

    def test_large_image_draws_unchanged(self):
        for seed in range(10):
            capped = random_config(seed, image_size=64)
            assert torch.equal(capped.kernel, random_config(seed).kernel)


class DegradationFileConfigTests(SimpleTestCase):
    def test_parse_and_build(self):
        file_config = parse_config(
            """
            schema_version: 1
            kernel: {kind: gaussian, side: 5, sigma_x: 1.2}
            scale_1: 2
            scale_2: 1
            noise: {kind: gaussian, sigma: 0.01}
            quality: 80
            """,
            DegradationFileConfig,
        )
        config = file_config.build(seed=7)
        assert config.kernel.shape == (5, 5)
        assert config.total_scale == 2
        assert config.quality == 80
        assert config.seed == 7

    def test_unknown_kernel_kind(self):
        file_config = parse_config(
            "schema_version: 1\nkernel: {kind: motion}\n", DegradationFileConfig
        )
        with pytest.raises(ConfigError):
            file_config.build(seed=0)
