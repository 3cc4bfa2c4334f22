"""
The visual codec: a lossless patchify that moves each non-overlapping p x p
patch into the channel axis. Patch ``(i, j)`` of the grid becomes the latent
vector ``z[i, j]`` whose channel index for pixel ``(dy, dx)`` and color ``c``
is ``(dy * p + dx) * 3 + c`` (row-major inside the patch, color fastest).

Being a permutation, the codec is linear, so diffusion in this latent space is
pixel-space diffusion up to reindexing.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from einops import rearrange

from instance_rsr.exceptions import ShapeError
from instance_rsr.synthdata import MAX_INSTANCES, snap_mask_rgb
from instance_rsr.typing import Grid

IMAGE_CHANNELS = 3


@dataclass(frozen=True)
class PatchCodec:
    patch_size: int = 4

    def __post_init__(self) -> None:
        if self.patch_size < 1:
            raise ShapeError("patch_size must be positive")

    @property
    def latent_channels(self) -> int:
        return IMAGE_CHANNELS * self.patch_size**2

    def grid_for(self, height: int, width: int) -> Grid:
        p = self.patch_size
        if height % p or width % p:
            raise ShapeError(
                f"Image size {height}x{width} is not divisible by patch size {p}"
            )
        return (height // p, width // p)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """
        ``... x H x W x 3`` image to ``... x H/p x W/p x 3p^2`` latent.
        """
        if image.dim() < 3 or image.shape[-1] != IMAGE_CHANNELS:
            raise ShapeError(
                f"Expected ... x H x W x 3 image, got {tuple(image.shape)}"
            )
        self.grid_for(image.shape[-3], image.shape[-2])
        p = self.patch_size
        return rearrange(image, "... (h p1) (w p2) c -> ... h w (p1 p2 c)", p1=p, p2=p)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.dim() < 3 or latent.shape[-1] != self.latent_channels:
            raise ShapeError(
                f"Expected ... x h x w x {self.latent_channels} latent, "
                + f"got {tuple(latent.shape)}"
            )
        p = self.patch_size
        return rearrange(
            latent,
            "... h w (p1 p2 c) -> ... (h p1) (w p2) c",
            p1=p,
            p2=p,
            c=IMAGE_CHANNELS,
        )

    def decode_mask(
        self, latent: torch.Tensor, max_id: int = MAX_INSTANCES
    ) -> torch.Tensor:
        """
        Decode a mask latent to instance IDs, snapping every pixel to the
        nearest valid mask color first.
        """
        return snap_mask_rgb(self.decode(latent), max_id=max_id)


@dataclass(frozen=True)
class JointLatent:
    # ... x h x w x 2c, image half first
    z: torch.Tensor
    patch_size: int

    @property
    def grid(self) -> Grid:
        return (int(self.z.shape[-3]), int(self.z.shape[-2]))

    @property
    def channels(self) -> int:
        return int(self.z.shape[-1])


def join(z_x: torch.Tensor, z_m: torch.Tensor, patch_size: int) -> JointLatent:
    if z_x.shape != z_m.shape:
        raise ShapeError(
            f"Cannot join latents of shapes {tuple(z_x.shape)} and {tuple(z_m.shape)}"
        )
    return JointLatent(z=torch.cat([z_x, z_m], dim=-1), patch_size=patch_size)


def split(joint: JointLatent) -> tuple[torch.Tensor, torch.Tensor]:
    if joint.channels % 2:
        raise ShapeError(f"Joint latent has an odd channel count {joint.channels}")
    half = joint.channels // 2
    return joint.z[..., :half], joint.z[..., half:]


def tokens(latent: torch.Tensor) -> torch.Tensor:
    return rearrange(latent, "... h w c -> ... (h w) c")


def untokens(sequence: torch.Tensor, grid: Grid) -> torch.Tensor:
    if sequence.shape[-2] != grid[0] * grid[1]:
        raise ShapeError(f"{sequence.shape[-2]} tokens don't fill a {grid} grid")
    return rearrange(sequence, "... (h w) c -> ... h w c", h=grid[0], w=grid[1])


def upsample_to_grid(latent: torch.Tensor, grid: Grid) -> torch.Tensor:
    """
    Nearest-patch replication of a coarse grid latent onto ``grid``.
    """
    h, w = latent.shape[-3], latent.shape[-2]
    if grid[0] % h or grid[1] % w:
        raise ShapeError(f"Latent grid {(h, w)} does not tile target grid {grid}")
    out = torch.repeat_interleave(latent, grid[0] // h, dim=-3)
    return torch.repeat_interleave(out, grid[1] // w, dim=-2)
