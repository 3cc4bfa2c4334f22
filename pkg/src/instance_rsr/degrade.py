"""
Second-order real-world degradation:

    y = ((x conv k) down_s + a) down_s' , then compression j

applied in exactly that order: blur, downsample by s, add noise, downsample
by s', compress. Images are H x W x 3 float tensors in [0, 1].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from scipy.fft import dctn, idctn

from instance_rsr.exceptions import ConfigError, ShapeError
from instance_rsr.synthdata import SceneSample
from instance_rsr.utils import derive_seed, make_generator

logger = logging.getLogger(__name__)

NoiseKind = Literal["gaussian", "poisson-gaussian"]
DownsampleMode = Literal["area", "nearest"]

KERNEL_SIGMA_RANGE = (0.2, 3.0)
KERNEL_SIDE_RANGE = (7, 21)
NOISE_SIGMA_RANGE = (0.0, 0.05)
QUALITY_RANGE = (30, 95)

# Standard JPEG luminance quantization table (quality 50)
JPEG_LUMINANCE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
BLOCK = 8


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind = "gaussian"
    sigma: float = 0.0
    # photon count at intensity 1.0 for the shot-noise part of poisson-gaussian
    poisson_peak: float = 255.0

    def __post_init__(self) -> None:
        if self.kind not in ("gaussian", "poisson-gaussian"):
            raise ConfigError(f"Unknown noise kind '{self.kind}'")
        if not 0.0 <= self.sigma <= 1.0:
            raise ConfigError(f"Noise sigma must be in [0, 1], got {self.sigma}")
        if self.poisson_peak <= 0:
            raise ConfigError("poisson_peak must be positive")


@dataclass(frozen=True, eq=False)
class DegradationConfig:
    kernel: torch.Tensor
    scale_1: int = 1
    scale_2: int = 1
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    quality: int | None = None
    seed: int = 0
    downsample_mode: DownsampleMode = "area"

    def __post_init__(self) -> None:
        check_kernel(self.kernel)
        if float(self.kernel.min()) < 0:
            raise ConfigError("Kernel entries must be non-negative")
        if abs(float(self.kernel.double().sum()) - 1.0) > 1e-9:
            raise ConfigError("Kernel must sum to 1 within 1e-9")
        if self.scale_1 < 1 or self.scale_2 < 1:
            raise ConfigError("Scale factors must be positive integers")
        check_quality(self.quality)
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.downsample_mode not in ("area", "nearest"):
            raise ConfigError(f"Unknown downsample mode '{self.downsample_mode}'")

    @property
    def total_scale(self) -> int:
        return self.scale_1 * self.scale_2

    def check_shape(self, height: int, width: int) -> None:
        if height % self.total_scale or width % self.total_scale:
            raise ShapeError(
                f"Image size {height}x{width} is not divisible by "
                + f"s*s' = {self.total_scale}"
            )


@dataclass(frozen=True)
class DegradedPair:
    hr: SceneSample
    # (H / (s*s')) x (W / (s*s')) x 3 in [0, 1]
    lr: torch.Tensor
    config: DegradationConfig


@dataclass(frozen=True)
class KernelSpec:
    """
    File-friendly kernel description, built into a tensor by ``build``.
    """

    kind: Literal["identity", "box", "gaussian"] = "identity"
    side: int = 1
    sigma_x: float = 1.0
    sigma_y: float | None = None
    theta: float = 0.0

    def build(self) -> torch.Tensor:
        if self.kind == "identity":
            return identity_kernel()
        elif self.kind == "box":
            return box_kernel(self.side)
        elif self.kind == "gaussian":
            return gaussian_kernel(self.side, self.sigma_x, self.sigma_y, self.theta)
        raise ConfigError(f"Unknown kernel kind '{self.kind}'")


@dataclass(frozen=True)
class DegradationFileConfig:
    """
    Mirrors ``DegradationConfig`` for the ``degrade --config`` YAML file.
    """

    kernel: KernelSpec = field(default_factory=KernelSpec)
    scale_1: int = 2
    scale_2: int = 2
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    quality: int | None = None
    downsample_mode: DownsampleMode = "area"

    def build(self, seed: int) -> DegradationConfig:
        return DegradationConfig(
            kernel=self.kernel.build(),
            scale_1=self.scale_1,
            scale_2=self.scale_2,
            noise=self.noise,
            quality=self.quality,
            seed=seed,
            downsample_mode=self.downsample_mode,
        )


def check_kernel(kernel: torch.Tensor) -> None:
    if kernel.dim() != 2:
        raise ShapeError(f"Kernel must be 2-D, got shape {tuple(kernel.shape)}")
    if kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ShapeError(f"Kernel sides must be odd, got {tuple(kernel.shape)}")


def check_quality(quality: int | None) -> None:
    if quality is None:
        return
    if isinstance(quality, bool) or not isinstance(quality, int):
        raise ConfigError(f"Quality must be an integer or None, got {quality!r}")
    if not 1 <= quality <= 100:
        raise ConfigError(f"Quality must be in [1, 100], got {quality}")


def identity_kernel() -> torch.Tensor:
    return torch.ones((1, 1), dtype=torch.float64)


def box_kernel(side: int) -> torch.Tensor:
    return torch.full((side, side), 1.0 / (side * side), dtype=torch.float64)


def gaussian_kernel(
    side: int,
    sigma_x: float,
    sigma_y: float | None = None,
    theta: float = 0.0,
) -> torch.Tensor:
    """
    Rotated anisotropic Gaussian truncated to ``side`` x ``side`` and
    renormalized to unit sum. ``sigma_y=None`` gives an isotropic kernel.
    """
    if side % 2 == 0 or side < 1:
        raise ShapeError(f"Kernel side must be odd and positive, got {side}")
    if sigma_y is None:
        sigma_y = sigma_x
    cos, sin = np.cos(theta), np.sin(theta)
    rotation = np.array([[cos, -sin], [sin, cos]])
    covariance = rotation @ np.diag([sigma_x**2, sigma_y**2]) @ rotation.T
    precision = np.linalg.inv(covariance)

    offsets = np.arange(side, dtype=np.float64) - side // 2
    xs, ys = np.meshgrid(offsets, offsets)
    points = np.stack([xs, ys], axis=-1)
    exponent = np.einsum("...i,ij,...j->...", points, precision, points)
    kernel = np.exp(-0.5 * exponent)
    return torch.from_numpy(kernel / kernel.sum())


def kernel_side_range(image_size: int | None = None) -> tuple[int, int]:
    low, high = KERNEL_SIDE_RANGE
    if image_size is None:
        return low, high
    if image_size < 2:
        raise ShapeError(f"Image size {image_size} is too small to blur")
    high = min(high, 2 * (image_size // 2) - 1)
    return min(low, high), high


def random_config(
    seed: int,
    scale_1: int = 2,
    scale_2: int = 2,
    downsample_mode: DownsampleMode = "area",
    image_size: int | None = None,
) -> DegradationConfig:
    """
    Draw a degradation from the documented ranges: Gaussian kernels (half
    isotropic, half anisotropic and rotated), Gaussian or poisson-gaussian
    noise, and JPEG-like compression at a random quality.

    With ``image_size`` (the smaller HR side) the kernel side is capped at
    ``2 * (image_size // 2) - 1`` so the kernel never outgrows the image.
    """
    rng = np.random.default_rng(seed)
    low, high = kernel_side_range(image_size)
    side = int(rng.choice(np.arange(low, high + 1, 2)))
    sigma_x = float(rng.uniform(*KERNEL_SIGMA_RANGE))
    if rng.random() < 0.5:
        kernel = gaussian_kernel(side, sigma_x)
    else:
        sigma_y = float(rng.uniform(*KERNEL_SIGMA_RANGE))
        kernel = gaussian_kernel(side, sigma_x, sigma_y, float(rng.uniform(0, np.pi)))

    kind: NoiseKind = "gaussian" if rng.random() < 0.7 else "poisson-gaussian"
    noise = NoiseSpec(kind=kind, sigma=float(rng.uniform(*NOISE_SIGMA_RANGE)))
    quality = int(rng.integers(QUALITY_RANGE[0], QUALITY_RANGE[1] + 1))

    return DegradationConfig(
        kernel=kernel,
        scale_1=scale_1,
        scale_2=scale_2,
        noise=noise,
        quality=quality,
        seed=derive_seed(seed, 1),
        downsample_mode=downsample_mode,
    )


def convolve(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """
    Per-channel 2-D convolution with reflect padding; output keeps the input
    shape.
    """
    check_kernel(kernel)
    kh, kw = kernel.shape
    if kh == 1 and kw == 1:
        return x * kernel.to(x.dtype)[0, 0]
    pad_h, pad_w = kh // 2, kw // 2
    height, width, channels = x.shape
    if pad_h >= height or pad_w >= width:
        raise ShapeError(
            f"Kernel {kh}x{kw} is too large for reflect padding of a "
            + f"{height}x{width} image"
        )

    batch = rearrange(x, "h w c -> 1 c h w")
    batch = F.pad(batch, (pad_w, pad_w, pad_h, pad_h), mode="reflect")
    # conv2d is a correlation, flipping the kernel makes it a convolution
    weight = torch.flip(kernel.to(x.dtype), dims=(0, 1))
    weight = weight.expand(channels, 1, kh, kw).contiguous()
    out = F.conv2d(batch, weight, groups=channels)
    return rearrange(out, "1 c h w -> h w c")


def downsample(x: torch.Tensor, s: int, mode: DownsampleMode = "area") -> torch.Tensor:
    height, width = x.shape[:2]
    if s < 1 or height % s or width % s:
        raise ShapeError(f"Image size {height}x{width} is not divisible by {s}")
    if s == 1:
        return x.clone()
    if mode == "area":
        blocks = rearrange(x, "(h s1) (w s2) c -> h w c (s1 s2)", s1=s, s2=s)
        return blocks.mean(dim=-1)
    elif mode == "nearest":
        return x[::s, ::s].clone()
    raise ConfigError(f"Unknown downsample mode '{mode}'")


def add_noise(
    x: torch.Tensor, noise: NoiseSpec, generator: torch.Generator
) -> torch.Tensor:
    if noise.kind == "gaussian":
        if noise.sigma == 0:
            return x.clone()
        out = x + noise.sigma * torch.randn(
            x.shape, generator=generator, dtype=x.dtype, device=x.device
        )
    else:
        peak = noise.poisson_peak
        out = torch.poisson(x.clamp(min=0.0) * peak, generator=generator) / peak
        if noise.sigma > 0:
            out = out + noise.sigma * torch.randn(
                x.shape, generator=generator, dtype=x.dtype, device=x.device
            )
    return out.clamp(0.0, 1.0)


def quantization_table(quality: int) -> np.ndarray:
    """
    The luminance table scaled the way the IJG encoder scales it for
    ``quality``.
    """
    check_quality(quality)
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((JPEG_LUMINANCE * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def compress_artifacts(x: torch.Tensor, quality: int | None) -> torch.Tensor:
    """
    JPEG-like artifact simulator: per-channel 8x8 block DCT, quantization by
    the quality-scaled table, inverse DCT and clamping. No entropy coding, so
    the result is bit-reproducible.
    """
    check_quality(quality)
    if quality is None:
        return x.clone()

    table = quantization_table(quality)
    array = x.detach().cpu().double().numpy()
    height, width = array.shape[:2]
    pad_h = (-height) % BLOCK
    pad_w = (-width) % BLOCK
    padded = np.pad(array, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")

    blocks = rearrange(
        padded * 255.0 - 128.0, "(hb b1) (wb b2) c -> hb wb c b1 b2", b1=BLOCK, b2=BLOCK
    )
    coefficients = dctn(blocks, axes=(-2, -1), norm="ortho")
    quantized = np.round(coefficients / table) * table
    restored = idctn(quantized, axes=(-2, -1), norm="ortho")
    restored = rearrange(restored, "hb wb c b1 b2 -> (hb b1) (wb b2) c")
    restored = (restored + 128.0) / 255.0

    out = np.clip(restored[:height, :width], 0.0, 1.0)
    out = torch.from_numpy(np.ascontiguousarray(out))
    return out.to(dtype=x.dtype, device=x.device)


def degrade_image(
    x: torch.Tensor,
    cfg: DegradationConfig,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    cfg.check_shape(x.shape[0], x.shape[1])
    if generator is None:
        generator = make_generator(cfg.seed)
    out = convolve(x, cfg.kernel)
    out = downsample(out, cfg.scale_1, cfg.downsample_mode)
    out = add_noise(out, cfg.noise, generator)
    out = downsample(out, cfg.scale_2, cfg.downsample_mode)
    out = compress_artifacts(out, cfg.quality)
    return out.clamp(0.0, 1.0)


def degrade(hr: SceneSample, cfg: DegradationConfig) -> DegradedPair:
    lr = degrade_image(hr.image, cfg)
    logger.debug(
        "Degraded %s %s -> %s (s=%d, s'=%d, noise=%s/%.3f, q=%s)",
        hr.name,
        tuple(hr.image.shape),
        tuple(lr.shape),
        cfg.scale_1,
        cfg.scale_2,
        cfg.noise.kind,
        cfg.noise.sigma,
        cfg.quality,
    )
    return DegradedPair(hr=hr, lr=lr, config=cfg)
