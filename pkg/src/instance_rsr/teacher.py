"""
The frozen teacher encoder that supplies per-patch alignment targets, a
file-backed alternative for precomputed features, and the learnable
projection head that maps backbone features into teacher space.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Literal, Sequence

import torch
from safetensors.torch import load_file
from torch import nn

from instance_rsr.backbone import BackboneConfig, HiddenFeatures
from instance_rsr.codec import PatchCodec, tokens
from instance_rsr.exceptions import ConfigError, ShapeError
from instance_rsr.utils import module_checksum

logger = logging.getLogger(__name__)

Activation = Literal["silu", "relu", "identity"]

FEATURES_KEY = "features"


class MixingLayer(nn.Module):
    """
    ``tanh(W h + b + M mean(h))``: a per-token affine map plus a global
    token-mean term, so a change in one patch reaches every output patch.
    """

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.linear = nn.Linear(dim, dim)
        self.mix = nn.Linear(dim, dim, bias=False)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.linear(h) + self.mix(h.mean(dim=-2, keepdim=True)))


class TeacherEncoder(nn.Module):
    def __init__(
        self, patch_size: int = 4, dim: int = 64, seed: int = 0, depth: int = 2
    ) -> None:
        super().__init__()
        self.codec = PatchCodec(patch_size)
        self.dim = dim
        self.seed = seed
        in_channels = self.codec.latent_channels
        generator = torch.Generator().manual_seed(seed)

        self.embed = nn.Linear(in_channels, dim, bias=False)
        self.layers = nn.ModuleList(MixingLayer(dim) for _ in range(depth))
        with torch.no_grad():
            # (semi-)orthogonal: orthonormal rows or columns, whichever fits
            gaussian = torch.randn(
                max(dim, in_channels), min(dim, in_channels), generator=generator
            )
            q, _ = torch.linalg.qr(gaussian)
            self.embed.weight.copy_(q if dim >= in_channels else q.T)
            for layer in self.layers:
                scale = dim**-0.5
                weight = torch.randn(dim, dim, generator=generator)
                layer.linear.weight.copy_(weight * scale)
                layer.linear.bias.copy_(torch.randn(dim, generator=generator) * 0.1)
                mix = torch.randn(dim, dim, generator=generator)
                layer.mix.weight.copy_(mix * scale)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True) -> TeacherEncoder:
        # frozen: never leaves eval mode
        return super().train(False)

    def checksum(self) -> str:
        return module_checksum(self)

    def check_grid(self, config: BackboneConfig, image_size: tuple[int, int]) -> None:
        grid = self.codec.grid_for(*image_size)
        if grid != tuple(config.grid):
            raise ShapeError(
                f"Teacher patch grid {grid} doesn't match backbone grid {config.grid}"
            )

    @torch.no_grad()
    def teacher_features(self, x: torch.Tensor) -> torch.Tensor:
        """
        ``... x H x W x 3`` image to ``... x N x D`` features, one per patch.
        """
        h = self.embed(tokens(self.codec.encode(x)).to(self.embed.weight.dtype))
        for layer in self.layers:
            h = layer(h)
        return h

    def features(
        self, images: torch.Tensor, names: Sequence[str] = ()
    ) -> torch.Tensor:
        return self.teacher_features(images)


class ExternalTeacherFeatures:
    """
    Reads precomputed ``N x D`` teacher features from
    ``<directory>/<sample name>.safetensors`` (tensor key ``features``),
    e.g. dumps of a pretrained vision encoder.
    """

    def __init__(self, directory: str | Path, num_tokens: int, dim: int) -> None:
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise ConfigError(f"Teacher feature directory '{directory}' does not exist")
        self.num_tokens = num_tokens
        self.dim = dim
        self._cache: dict[str, torch.Tensor] = {}

    def load(self, name: str) -> torch.Tensor:
        if name not in self._cache:
            path = self.directory / f"{name}.safetensors"
            if not path.exists():
                raise ConfigError(f"No teacher features for sample '{name}' at {path}")
            try:
                tensor = load_file(str(path))[FEATURES_KEY]
            except Exception as exc:
                raise ConfigError(f"Cannot read teacher features from {path}: {exc}")
            if tuple(tensor.shape) != (self.num_tokens, self.dim):
                raise ShapeError(
                    f"Teacher features in {path} have shape {tuple(tensor.shape)}, "
                    + f"expected {(self.num_tokens, self.dim)}"
                )
            self._cache[name] = tensor
        return self._cache[name]

    def features(
        self, images: torch.Tensor, names: Sequence[str] = ()
    ) -> torch.Tensor:
        if len(names) != images.shape[0]:
            raise ShapeError("External teacher features need one sample name per image")
        stacked = torch.stack([self.load(name) for name in names])
        return stacked.to(dtype=images.dtype, device=images.device)


class ProjectionHead(nn.Module):
    def __init__(
        self,
        width: int,
        dim: int,
        hidden: int | None = None,
        activation: Activation = "silu",
    ) -> None:
        super().__init__()
        hidden = hidden or max(width, dim)
        if activation == "silu":
            act: nn.Module = nn.SiLU()
        elif activation == "relu":
            act = nn.ReLU()
        elif activation == "identity":
            act = nn.Identity()
        else:
            raise ConfigError(f"Unknown activation '{activation}'")
        self.width = width
        self.dim = dim
        self.mlp = nn.Sequential(
            nn.Linear(width, hidden), act, nn.Linear(hidden, dim)
        )

    def identity_init(self) -> ProjectionHead:
        """
        Set both linear layers to the identity. The head is then an exact
        identity map only with the ``identity`` activation; with ``relu`` it
        is one on non-negative inputs, and with ``silu`` it computes silu(f).
        """
        first, last = self.mlp[0], self.mlp[2]
        if not self.width == first.out_features == self.dim:
            raise ConfigError("identity_init needs width == hidden == dim")
        with torch.no_grad():
            for linear in (first, last):
                linear.weight.copy_(torch.eye(self.dim))
                linear.bias.zero_()
        return self

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.mlp(f)

    def project(
        self, features: HiddenFeatures | torch.Tensor, num_tokens: int | None = None
    ) -> torch.Tensor:
        f = features.f if isinstance(features, HiddenFeatures) else features
        if f.shape[-1] != self.width:
            raise ShapeError(
                f"Feature width {f.shape[-1]} doesn't match head width {self.width}"
            )
        if num_tokens is not None and f.shape[-2] != num_tokens:
            raise ShapeError(
                f"{f.shape[-2]} diffusion patches don't match "
                + f"{num_tokens} teacher patches"
            )
        return self(f)
