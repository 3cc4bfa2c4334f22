from __future__ import annotations

import pytest
import torch
from django.test import SimpleTestCase
from hypothesis import given, settings
from hypothesis import strategies as st

from instance_rsr.codec import (
    JointLatent,
    PatchCodec,
    join,
    split,
    tokens,
    untokens,
    upsample_to_grid,
)
from instance_rsr.exceptions import ShapeError
from instance_rsr.synthdata import SceneSpec, encode_mask_rgb, generate_scene
from tests.testapp.utils import random_image


class PatchCodecTests(SimpleTestCase):
    def test_channel_layout(self):
        x = torch.arange(12, dtype=torch.float64).reshape(2, 2, 3)
        z = PatchCodec(2).encode(x)
        assert z.shape == (1, 1, 12)
        assert z[0, 0].tolist() == list(range(12))

    def test_round_trip_exact(self):
        for patch_size in (1, 2, 4):
            codec = PatchCodec(patch_size)
            x = random_image(16, 8, seed=patch_size)
            z = codec.encode(x)
            assert z.shape == (16 // patch_size, 8 // patch_size, 3 * patch_size**2)
            assert torch.equal(codec.decode(z), x)

    def test_batched(self):
        codec = PatchCodec(4)
        x = torch.stack([random_image(8, 8, seed=i) for i in range(3)])
        assert codec.encode(x).shape == (3, 2, 2, 48)
        assert torch.equal(codec.decode(codec.encode(x)), x)

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            PatchCodec(4).encode(random_image(10, 8))

    def test_wrong_channels(self):
        with pytest.raises(ShapeError):
            PatchCodec(2).encode(torch.zeros(4, 4, 4))

    def test_wrong_latent_channels(self):
        with pytest.raises(ShapeError):
            PatchCodec(2).decode(torch.zeros(2, 2, 11))

    def test_decode_mask(self):
        codec = PatchCodec(4)
        scene = generate_scene(SceneSpec(width=32, height=32, seed=42))
        z_m = codec.encode(encode_mask_rgb(scene.mask))
        assert torch.equal(codec.decode_mask(z_m), scene.mask)

    @settings(deadline=None)
    @given(
        patch_size=st.integers(1, 4),
        rows=st.integers(1, 4),
        cols=st.integers(1, 4),
        seed=st.integers(0, 1000),
    )
    def test_round_trip_property(self, patch_size, rows, cols, seed):
        codec = PatchCodec(patch_size)
        x = random_image(rows * patch_size, cols * patch_size, seed=seed)
        assert torch.equal(codec.decode(codec.encode(x)), x)


class JointLatentTests(SimpleTestCase):
    def test_join_split(self):
        z_x = torch.rand(2, 4, 4, 12, dtype=torch.float64)
        z_m = torch.rand(2, 4, 4, 12, dtype=torch.float64)
        joint = join(z_x, z_m, patch_size=2)
        assert joint.channels == 24
        assert joint.grid == (4, 4)
        a, b = split(joint)
        assert torch.equal(a, z_x)
        assert torch.equal(b, z_m)

    def test_image_half_first(self):
        joint = join(torch.zeros(1, 1, 3), torch.ones(1, 1, 3), patch_size=1)
        assert joint.z[0, 0].tolist() == [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]

    def test_join_mismatch(self):
        with pytest.raises(ShapeError):
            join(torch.zeros(2, 2, 12), torch.zeros(2, 2, 48), patch_size=2)

    def test_split_odd(self):
        with pytest.raises(ShapeError):
            split(JointLatent(torch.zeros(2, 2, 7), patch_size=1))


class TokenTests(SimpleTestCase):
    def test_row_major(self):
        latent = torch.arange(6, dtype=torch.float64).reshape(2, 3, 1)
        assert tokens(latent)[:, 0].tolist() == [0, 1, 2, 3, 4, 5]
        assert torch.equal(untokens(tokens(latent), (2, 3)), latent)

    def test_untokens_count(self):
        with pytest.raises(ShapeError):
            untokens(torch.zeros(5, 3), (2, 3))


class UpsampleToGridTests(SimpleTestCase):
    def test_replicates_patches(self):
        latent = torch.tensor([[[1.0], [2.0]], [[3.0], [4.0]]])
        out = upsample_to_grid(latent, (4, 4))
        assert out[..., 0].tolist() == [
            [1.0, 1.0, 2.0, 2.0],
            [1.0, 1.0, 2.0, 2.0],
            [3.0, 3.0, 4.0, 4.0],
            [3.0, 3.0, 4.0, 4.0],
        ]

    def test_not_tiling(self):
        with pytest.raises(ShapeError):
            upsample_to_grid(torch.zeros(3, 3, 1), (4, 4))
