"""
Inference: LR image in, super-resolved image and instance mask out.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from einops import rearrange

from instance_rsr.backbone import Backbone
from instance_rsr.codec import JointLatent, PatchCodec, split, upsample_to_grid
from instance_rsr.diffusion import NoiseSchedule, SamplerKind, sample
from instance_rsr.exceptions import ShapeError
from instance_rsr.synthdata import MAX_INSTANCES

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SRResult:
    # ... x H x W x 3 in [0, 1]
    image: torch.Tensor
    # ... x H x W instance IDs, None when the model has no mask channels
    mask: torch.Tensor | None
    # raw decoded mask colors before snapping
    mask_rgb: torch.Tensor | None
    latent: torch.Tensor


@dataclass
class SuperResolver:
    backbone: Backbone
    schedule: NoiseSchedule
    codec: PatchCodec
    with_mask: bool = True
    max_id: int = MAX_INSTANCES

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.backbone.config.grid)  # type: ignore [return-value]

    @property
    def hr_size(self) -> tuple[int, int]:
        p = self.codec.patch_size
        return (self.grid[0] * p, self.grid[1] * p)

    def condition(self, lr: torch.Tensor) -> torch.Tensor:
        """
        Encode a batch of LR images and replicate each LR patch over the HR
        patch grid.
        """
        z_y = self.codec.encode(lr)
        try:
            return upsample_to_grid(z_y, self.grid)
        except ShapeError as exc:
            raise ShapeError(
                f"LR image {tuple(lr.shape[-3:-1])} doesn't tile "
                + f"the HR size {self.hr_size}"
            ) from exc

    @torch.no_grad()
    def super_resolve(
        self,
        lr: torch.Tensor,
        steps: int = 10,
        eta: float = 0.0,
        generator: torch.Generator | None = None,
        sampler: SamplerKind = "ddim",
        size: tuple[int, int] | None = None,
    ) -> SRResult:
        """
        Sample the joint latent for ``lr`` (``H x W x 3`` or batched), split
        it, decode both halves and snap the mask half to instance IDs.
        ``size`` resizes the outputs from the model resolution, bicubic for
        the image and nearest for the mask.
        """
        single = lr.dim() == 3
        if single:
            lr = lr[None]
        parameter = next(self.backbone.parameters())
        lr = lr.to(dtype=parameter.dtype, device=parameter.device)
        cond = self.condition(lr)

        shape = (lr.shape[0], *self.grid, self.backbone.config.in_channels)
        latent = sample(
            self.schedule,
            self.backbone.denoiser,
            cond,
            shape,
            steps=steps,
            eta=eta,
            generator=generator,
            sampler=sampler,
        )

        mask = mask_rgb = None
        if self.with_mask:
            z_x, z_m = split(JointLatent(latent, self.codec.patch_size))
            mask_rgb = self.codec.decode(z_m)
            mask = self.codec.decode_mask(z_m, self.max_id)
        else:
            z_x = latent
        image = self.codec.decode(z_x).clamp(0.0, 1.0)

        if size is not None and tuple(size) != tuple(image.shape[-3:-1]):
            image = resize_image(image, size)
            if mask is not None:
                mask = resize_mask(mask, size)

        if single:
            image = image[0]
            mask = None if mask is None else mask[0]
            mask_rgb = None if mask_rgb is None else mask_rgb[0]
            latent = latent[0]
        return SRResult(image=image, mask=mask, mask_rgb=mask_rgb, latent=latent)


def resize_image(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    batch = rearrange(image, "b h w c -> b c h w")
    out = F.interpolate(batch, size=size, mode="bicubic", align_corners=False)
    return rearrange(out, "b c h w -> b h w c").clamp(0.0, 1.0)


def resize_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    out = F.interpolate(mask[:, None].double(), size=size, mode="nearest")
    return out[:, 0].long()
