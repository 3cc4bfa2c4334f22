"""
Noise schedules, the forward noising process and the reverse samplers.

Timesteps are 1-based: ``alphas[t]`` for ``t`` in ``1..T``. Index 0 holds the
convention ``alpha_bar[0] == 1`` so that a step to ``t_prev = 0`` lands on the
clean latent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np
import torch

from instance_rsr.exceptions import ConfigError, ShapeError
from instance_rsr.typing import Denoiser

logger = logging.getLogger(__name__)

ScheduleKind = Literal["linear", "cosine"]
SamplerKind = Literal["ddim", "ancestral"]

DEFAULT_INFERENCE_STEPS = (5, 10, 50)


class StepOutput(NamedTuple):
    prev_sample: torch.Tensor
    # the predicted clean latent, exposed for logging
    pred_original_sample: torch.Tensor


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    # length T + 1, float64; index 0 is the identity convention
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return len(self.alphas) - 1

    @property
    def betas(self) -> torch.Tensor:
        return 1.0 - self.alphas

    @classmethod
    def from_betas(
        cls, betas: torch.Tensor, kind: str = "custom", validate: bool = True
    ) -> NoiseSchedule:
        betas = torch.as_tensor(betas, dtype=torch.float64)
        alphas = torch.cat([torch.ones(1, dtype=torch.float64), 1.0 - betas])
        alpha_bars = torch.cumprod(alphas, dim=0)
        schedule = cls(kind=kind, alphas=alphas, alpha_bars=alpha_bars)
        if validate:
            schedule.validate()
        return schedule

    @classmethod
    def linear(
        cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2
    ) -> NoiseSchedule:
        if T < 1:
            raise ConfigError(f"T must be at least 1, got {T}")
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        return cls.from_betas(betas, kind="linear")

    @classmethod
    def cosine(cls, T: int = 1000, offset: float = 0.008) -> NoiseSchedule:
        if T < 1:
            raise ConfigError(f"T must be at least 1, got {T}")
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + offset) / (1 + offset) * math.pi / 2) ** 2
        alpha_bars = f / f[0]
        betas = np.clip(1.0 - alpha_bars[1:] / alpha_bars[:-1], 1e-8, 0.999)
        return cls.from_betas(torch.from_numpy(betas), kind="cosine")

    @classmethod
    def build(cls, kind: str, T: int) -> NoiseSchedule:
        if kind == "linear":
            return cls.linear(T)
        elif kind == "cosine":
            return cls.cosine(T)
        raise ConfigError(f"Unknown schedule kind '{kind}'")

    def validate(self) -> None:
        alphas = self.alphas[1:]
        if not bool(((alphas > 0) & (alphas < 1)).all()):
            raise ConfigError("Every alpha_t must lie strictly inside (0, 1)")
        if not bool((self.alpha_bars[1:] < self.alpha_bars[:-1]).all()):
            raise ConfigError("alpha_bar must be strictly decreasing")

    def _check_t(self, t: int, low: int = 1) -> None:
        if not low <= t <= self.T:
            raise ConfigError(f"Timestep {t} out of range [{low}, {self.T}]")

    def forward_step(
        self,
        z_prev: torch.Tensor,
        t: int,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """
        One ancestral noising step q(z_t | z_{t-1}).
        """
        self._check_t(t)
        alpha = float(self.alphas[t])
        noise = torch.randn(
            z_prev.shape, generator=generator, dtype=z_prev.dtype, device=z_prev.device
        )
        return math.sqrt(alpha) * z_prev + math.sqrt(1.0 - alpha) * noise

    def forward_marginal(
        self, z_0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor
    ) -> torch.Tensor:
        """
        Closed-form q(z_t | z_0). ``t`` is an int or a per-sample tensor over
        the leading batch dimension.
        """
        if eps.shape != z_0.shape:
            raise ShapeError(
                f"eps shape {tuple(eps.shape)} doesn't match z_0 {tuple(z_0.shape)}"
            )
        alpha_bar = self._gather(self.alpha_bars, t, z_0)
        return alpha_bar.sqrt() * z_0 + (1.0 - alpha_bar).sqrt() * eps

    def _gather(
        self, values: torch.Tensor, t: int | torch.Tensor, like: torch.Tensor
    ) -> torch.Tensor:
        if isinstance(t, int):
            self._check_t(t, low=0)
            return values[t].to(dtype=like.dtype, device=like.device)
        t = t.long().cpu()
        if int(t.min()) < 0 or int(t.max()) > self.T:
            raise ConfigError(f"Timesteps out of range [0, {self.T}]")
        gathered = values[t].to(dtype=like.dtype, device=like.device)
        return gathered.reshape(-1, *([1] * (like.dim() - 1)))

    def ddim_step(
        self,
        z_t: torch.Tensor,
        eps_hat: torch.Tensor,
        t: int,
        t_prev: int,
        eta: float = 0.0,
        generator: torch.Generator | None = None,
    ) -> StepOutput:
        if t_prev >= t:
            raise ConfigError(f"t_prev ({t_prev}) must be smaller than t ({t})")
        if eta < 0:
            raise ConfigError("eta must be non-negative")
        self._check_t(t)
        self._check_t(t_prev, low=0)

        alpha_bar = float(self.alpha_bars[t])
        alpha_bar_prev = float(self.alpha_bars[t_prev])
        z_0_hat = (z_t - math.sqrt(1.0 - alpha_bar) * eps_hat) / math.sqrt(alpha_bar)

        sigma = eta * math.sqrt(
            (1.0 - alpha_bar_prev)
            / (1.0 - alpha_bar)
            * (1.0 - alpha_bar / alpha_bar_prev)
        )
        direction = math.sqrt(max(1.0 - alpha_bar_prev - sigma**2, 0.0)) * eps_hat
        prev = math.sqrt(alpha_bar_prev) * z_0_hat + direction
        if sigma > 0:
            prev = prev + sigma * torch.randn(
                z_t.shape, generator=generator, dtype=z_t.dtype, device=z_t.device
            )
        return StepOutput(prev_sample=prev, pred_original_sample=z_0_hat)

    def ancestral_step(
        self,
        z_t: torch.Tensor,
        eps_hat: torch.Tensor,
        t: int,
        generator: torch.Generator | None = None,
    ) -> StepOutput:
        """
        p(z_{t-1} | z_t) with the fixed posterior variance of the schedule.
        """
        self._check_t(t)
        alpha = float(self.alphas[t])
        alpha_bar = float(self.alpha_bars[t])
        alpha_bar_prev = float(self.alpha_bars[t - 1])
        beta = 1.0 - alpha

        z_0_hat = (z_t - math.sqrt(1.0 - alpha_bar) * eps_hat) / math.sqrt(alpha_bar)
        mean = (z_t - beta / math.sqrt(1.0 - alpha_bar) * eps_hat) / math.sqrt(alpha)
        if t == 1:
            return StepOutput(prev_sample=mean, pred_original_sample=z_0_hat)
        variance = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
        noise = torch.randn(
            z_t.shape, generator=generator, dtype=z_t.dtype, device=z_t.device
        )
        return StepOutput(
            prev_sample=mean + math.sqrt(variance) * noise,
            pred_original_sample=z_0_hat,
        )


def inference_timesteps(T: int, steps: int) -> list[int]:
    """
    Evenly spaced descending timesteps from T down to 0 (inclusive), giving
    ``steps`` transitions.
    """
    if steps < 1:
        raise ConfigError("steps must be at least 1")
    steps = min(steps, T)
    points = np.rint(np.linspace(T, 0, steps + 1)).astype(int)
    out: list[int] = []
    for point in points:
        if not out or point < out[-1]:
            out.append(int(point))
    return out


def sample_timesteps(
    batch_size: int, T: int, generator: torch.Generator | None = None
) -> torch.Tensor:
    return torch.randint(1, T + 1, (batch_size,), generator=generator)


def sample(
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    cond: torch.Tensor,
    shape: tuple[int, ...],
    steps: int = 10,
    eta: float = 0.0,
    generator: torch.Generator | None = None,
    sampler: SamplerKind = "ddim",
) -> torch.Tensor:
    """
    Run the reverse process from a standard normal latent of ``shape`` and
    return the final (joint) latent. ``denoiser(z_t, t, cond)`` receives a
    per-sample timestep tensor. The ancestral sampler always walks all T
    steps.
    """
    if steps < 1:
        raise ConfigError("steps must be at least 1")
    z = torch.randn(shape, generator=generator, dtype=cond.dtype, device=cond.device)
    batch = shape[0]

    if sampler == "ancestral":
        for t in range(schedule.T, 0, -1):
            t_batch = torch.full((batch,), t, dtype=torch.long, device=cond.device)
            eps_hat = denoiser(z, t_batch, cond)
            z = schedule.ancestral_step(z, eps_hat, t, generator).prev_sample
        return z
    elif sampler != "ddim":
        raise ConfigError(f"Unknown sampler '{sampler}'")

    timesteps = inference_timesteps(schedule.T, steps)
    for t, t_prev in zip(timesteps[:-1], timesteps[1:]):
        t_batch = torch.full((batch,), t, dtype=torch.long, device=cond.device)
        eps_hat = denoiser(z, t_batch, cond)
        output = schedule.ddim_step(z, eps_hat, t, t_prev, eta, generator)
        z = output.prev_sample
        logger.debug(
            "ddim t=%d -> %d, |z0_hat| mean %.4f",
            t,
            t_prev,
            float(output.pred_original_sample.abs().mean()),
        )
    return z
