"""
A small diffusion transformer over joint latent patch tokens, with a
ControlNet-style condition branch.

The branch mirrors the first ``inject_layers`` backbone blocks. Its output at
layer ``i`` goes through a zero-initialized linear projection and is added to
the backbone tokens before block ``i``, so at initialization the prediction is
exactly independent of the condition.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import torch
from torch import nn

from instance_rsr.codec import tokens, untokens
from instance_rsr.exceptions import ConfigError, ShapeError
from instance_rsr.typing import Grid

logger = logging.getLogger(__name__)

# default alignment layer as a fraction of depth
TAP_FRACTION = 10 / 28


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 8
    width: int = 256
    heads: int = 4
    in_channels: int = 96
    cond_channels: int = 48
    grid: Grid = (16, 16)
    tap_layer: int | None = None
    inject_layers: int | None = None
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")
        if self.width % self.heads:
            raise ConfigError(
                f"width ({self.width}) must be divisible by heads ({self.heads})"
            )
        if not 1 <= self.resolved_tap_layer <= self.depth:
            raise ConfigError(
                f"tap_layer must be in [1, {self.depth}], got {self.tap_layer}"
            )
        if not 0 <= self.resolved_inject_layers <= self.depth:
            raise ConfigError(f"inject_layers must be in [0, {self.depth}]")

    @property
    def resolved_tap_layer(self) -> int:
        if self.tap_layer is not None:
            return self.tap_layer
        return max(1, round(self.depth * TAP_FRACTION))

    @property
    def resolved_inject_layers(self) -> int:
        if self.inject_layers is not None:
            return self.inject_layers
        return max(1, self.depth // 2)

    @property
    def num_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @classmethod
    def for_case(
        cls, case: int, patch_size: int, grid: Grid, **kwargs: object
    ) -> BackboneConfig:
        """
        Channel layout for an ablation case: the joint image + mask latent
        (2c channels) unless mask modeling is ablated (case 2, c channels).
        """
        c = 3 * patch_size**2
        in_channels = c if case == 2 else 2 * c
        return cls(
            in_channels=in_channels,
            cond_channels=c,
            grid=grid,
            **kwargs,  # type: ignore [arg-type]
        )

    def with_tap_layer(self, layer: int) -> BackboneConfig:
        return replace(self, tap_layer=layer)


@dataclass(frozen=True)
class HiddenFeatures:
    # B x N x width, one vector per latent patch in row-major grid order
    f: torch.Tensor
    layer: int
    grid: Grid

    @property
    def num_tokens(self) -> int:
        return int(self.f.shape[-2])


@dataclass(frozen=True)
class BackboneOutput:
    eps_hat: torch.Tensor
    features: HiddenFeatures
    taps: dict[int, torch.Tensor]


def timestep_embedding(
    t: torch.Tensor, dim: int, max_period: float = 10000.0
) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    ).to(device=t.device)
    args = t.double()[:, None] * freqs[None]
    embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        embedding = torch.cat([embedding, torch.zeros_like(embedding[:, :1])], dim=-1)
    return embedding


def sincos_pos_embed(dim: int, grid: Grid) -> torch.Tensor:
    """
    Fixed 2-D sine-cosine positional embedding, N x dim.
    """
    if dim % 4:
        raise ConfigError(f"width must be divisible by 4 for 2-D embeddings, got {dim}")
    rows, cols = torch.meshgrid(
        torch.arange(grid[0], dtype=torch.float64),
        torch.arange(grid[1], dtype=torch.float64),
        indexing="ij",
    )
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    parts = []
    for coordinate in (rows.reshape(-1), cols.reshape(-1)):
        angles = coordinate[:, None] * omega[None]
        parts.extend([torch.sin(angles), torch.cos(angles)])
    return torch.cat(parts, dim=-1)


def zero_module(module: nn.Module) -> nn.Module:
    for parameter in module.parameters():
        nn.init.zeros_(parameter)
    return module


class Attention(nn.Module):
    def __init__(self, width: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        batch, count, width = x.shape
        head_dim = width // self.heads
        qkv = self.qkv(x).reshape(batch, count, 3, self.heads, head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(head_dim)
        out = scores.softmax(dim=-1) @ v
        out = out.transpose(1, 2).reshape(batch, count, width)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int = 4) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width),
            nn.GELU(),
            nn.Linear(mlp_ratio * width, width),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ConditionBranch(nn.Module):
    def __init__(self, config: BackboneConfig) -> None:
        super().__init__()
        width = config.width
        self.cond_in = nn.Linear(config.cond_channels, width)
        self.blocks = nn.ModuleList(
            Block(width, config.heads, config.mlp_ratio)
            for _ in range(config.resolved_inject_layers)
        )
        self.injections = nn.ModuleList(
            zero_module(nn.Linear(width, width))
            for _ in range(config.resolved_inject_layers)
        )


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig) -> None:
        super().__init__()
        self.config = config
        width = config.width
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.patch_in = nn.Linear(config.in_channels, width)
            self.time_mlp = nn.Sequential(
                nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width)
            )
            self.blocks = nn.ModuleList(
                Block(width, config.heads, config.mlp_ratio)
                for _ in range(config.depth)
            )
            self.branch = ConditionBranch(config)
            self.norm_out = nn.LayerNorm(width)
            self.patch_out = nn.Linear(width, config.in_channels)
        self.register_buffer(
            "pos_embed",
            sincos_pos_embed(width, config.grid).float(),
            persistent=False,
        )

    def _check_inputs(self, z_t: torch.Tensor, cond: torch.Tensor) -> None:
        config = self.config
        expected = (*config.grid, config.in_channels)
        if z_t.dim() != 4 or tuple(z_t.shape[1:]) != expected:
            raise ShapeError(
                f"Expected z_t of shape B x {expected}, got {tuple(z_t.shape)}"
            )
        expected_cond = (z_t.shape[0], *config.grid, config.cond_channels)
        if tuple(cond.shape) != expected_cond:
            raise ShapeError(
                f"Expected condition of shape {expected_cond}, got {tuple(cond.shape)}"
            )

    def forward(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        cond: torch.Tensor,
        tap_layers: tuple[int, ...] = (),
        stop_at: int | None = None,
    ) -> BackboneOutput:
        self._check_inputs(z_t, cond)
        config = self.config
        tap_layer = config.resolved_tap_layer
        last = config.depth if stop_at is None else stop_at

        pos = self.pos_embed.to(dtype=z_t.dtype)
        temb = self.time_mlp(timestep_embedding(t, config.width).to(dtype=z_t.dtype))
        x = self.patch_in(tokens(z_t)) + pos + temb[:, None]
        c = self.branch.cond_in(tokens(cond)) + x

        taps: dict[int, torch.Tensor] = {}
        features = x
        for layer, block in enumerate(self.blocks, start=1):
            if layer <= len(self.branch.blocks):
                c = self.branch.blocks[layer - 1](c)
                x = x + self.branch.injections[layer - 1](c)
            x = block(x)
            if layer == tap_layer:
                features = x
            if layer in tap_layers or layer == stop_at:
                taps[layer] = x
            if layer == last:
                break

        if stop_at is not None:
            eps_hat = torch.empty(0, dtype=z_t.dtype, device=z_t.device)
        else:
            eps_hat = untokens(self.patch_out(self.norm_out(x)), config.grid)
        return BackboneOutput(
            eps_hat=eps_hat,
            features=HiddenFeatures(f=features, layer=tap_layer, grid=config.grid),
            taps=taps,
        )

    def predict_eps(
        self, z_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor
    ) -> tuple[torch.Tensor, HiddenFeatures]:
        output = self(z_t, t, cond)
        return output.eps_hat, output.features

    def tap(
        self, z_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor, layer: int
    ) -> HiddenFeatures:
        """
        Features after block ``layer``, computed by a forward pass truncated
        there.
        """
        if not 1 <= layer <= self.config.depth:
            raise ConfigError(f"Layer {layer} out of range [1, {self.config.depth}]")
        output = self(z_t, t, cond, stop_at=layer)
        return HiddenFeatures(f=output.taps[layer], layer=layer, grid=self.config.grid)

    def denoiser(
        self, z_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor
    ) -> torch.Tensor:
        return self(z_t, t, cond).eps_hat
