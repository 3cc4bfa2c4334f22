"""
Training objectives: noise-prediction MSE, per-patch representation
alignment against teacher features, and the instance-scale loss that pulls
each instance's patch-feature norms to a randomly drawn target. Plus a
finite-difference gradient checker used to verify all of them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Literal, Mapping, NamedTuple, Sequence

import torch
import torch.nn.functional as F
from einops import rearrange

from instance_rsr.backbone import HiddenFeatures
from instance_rsr.exceptions import ConfigError, ShapeError
from instance_rsr.synthdata import MAX_INSTANCES
from instance_rsr.teacher import ProjectionHead

logger = logging.getLogger(__name__)

AlignTokens = Literal["all", "instances"]

COSINE_EPS = 1e-8
SCALE_TARGET_RANGE = (0.5, 2.0)

LOG_COLUMNS = (
    "step",
    "l_denoise",
    "l_repa",
    "l_is",
    "l_total",
    "grad_norm_denoise",
    "grad_norm_repa",
    "grad_norm_is",
)


@dataclass(frozen=True)
class LossWeights:
    lambda_repa: float = 0.5
    lambda_is: float = 0.1

    def __post_init__(self) -> None:
        if self.lambda_repa < 0 or self.lambda_is < 0:
            raise ConfigError("Loss weights must be non-negative")

    @classmethod
    def zero(cls) -> LossWeights:
        return cls(lambda_repa=0.0, lambda_is=0.0)


@dataclass(frozen=True, eq=False)
class InstanceScaleTargets:
    # B x N instance ID per patch, 0 = background
    assignment: torch.Tensor
    # B x (MAX_INSTANCES + 1) target norm per instance ID; column 0 unused
    targets: torch.Tensor
    s_min: float = SCALE_TARGET_RANGE[0]
    s_max: float = SCALE_TARGET_RANGE[1]

    def per_patch(self) -> torch.Tensor:
        return torch.gather(self.targets, -1, self.assignment)

    def instance_mask(self) -> torch.Tensor:
        return self.assignment > 0

    def as_dict(self, index: int = 0) -> dict[int, float]:
        ids = sorted({int(i) for i in self.assignment[index].unique()} - {0})
        return {i: float(self.targets[index, i]) for i in ids}


def assign_patches(mask: torch.Tensor, patch_size: int) -> torch.Tensor:
    """
    ``... x H x W`` instance mask to ``... x N`` patch owners by majority pixel
    vote, ties going to the smallest ID. Background (0) takes part in the
    vote, so a patch that is mostly background is a background patch.
    """
    p = patch_size
    if mask.shape[-2] % p or mask.shape[-1] % p:
        raise ShapeError(
            f"Mask of size {tuple(mask.shape[-2:])} is not divisible by patch size {p}"
        )
    pixels = rearrange(
        mask.long(), "... (h p1) (w p2) -> ... (h w) (p1 p2)", p1=p, p2=p
    )
    counts = F.one_hot(pixels, num_classes=int(mask.max()) + 1).sum(dim=-2)
    # argmax returns the first maximal index, i.e. the smallest tied ID
    return counts.argmax(dim=-1)


def sample_scale_targets(
    assignment: torch.Tensor,
    generator: torch.Generator | None = None,
    s_min: float = SCALE_TARGET_RANGE[0],
    s_max: float = SCALE_TARGET_RANGE[1],
) -> InstanceScaleTargets:
    """
    Draw a fresh uniform target in ``[s_min, s_max]`` for every instance ID of
    every sample. A full table is drawn regardless of which IDs occur, so the
    generator advances by the same amount for every batch.
    """
    if not 0 < s_min <= s_max:
        raise ConfigError(f"Invalid scale target range [{s_min}, {s_max}]")
    if assignment.dim() == 1:
        assignment = assignment[None]
    batch = assignment.shape[0]
    draws = torch.rand(
        (batch, MAX_INSTANCES + 1), generator=generator, dtype=torch.float64
    )
    targets = s_min + (s_max - s_min) * draws
    targets[:, 0] = 0.0
    return InstanceScaleTargets(
        assignment=assignment.long(),
        targets=targets.to(device=assignment.device),
        s_min=s_min,
        s_max=s_max,
    )


def denoise_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """
    Mean (not summed) squared error over every element and the batch.
    """
    if eps.shape != eps_hat.shape:
        raise ShapeError(
            f"eps {tuple(eps.shape)} and eps_hat {tuple(eps_hat.shape)} differ in shape"
        )
    return F.mse_loss(eps_hat, eps.to(eps_hat.dtype), reduction="mean")


def repa_loss(
    d: torch.Tensor,
    f: HiddenFeatures | torch.Tensor,
    head: ProjectionHead,
    token_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """
    Negative mean per-patch cosine similarity between the projected features
    and the teacher features. A zero-norm vector scores 0. ``token_mask``
    restricts the mean to the selected patches.
    """
    projected = head.project(f, num_tokens=d.shape[-2])
    if projected.shape != d.shape:
        raise ShapeError(
            f"Projected features {tuple(projected.shape)} don't match teacher "
            + f"features {tuple(d.shape)}"
        )
    similarity = F.cosine_similarity(
        projected, d.to(projected.dtype), dim=-1, eps=COSINE_EPS
    )
    if token_mask is None:
        mean = similarity.mean()
    else:
        if not bool(token_mask.any()):
            logger.warning("No patches selected for alignment; REPA loss is 0")
            return similarity.sum() * 0.0
        mean = similarity[token_mask].mean()
    return torch.clamp(-mean, -1.0, 1.0)


def instance_scale_loss(
    f: HiddenFeatures | torch.Tensor, targets: InstanceScaleTargets
) -> torch.Tensor:
    """
    Mean over all non-background patches of ``(|f_n| - s_target)^2``.
    """
    features = f.f if isinstance(f, HiddenFeatures) else f
    if features.dim() == 2:
        features = features[None]
    if tuple(targets.assignment.shape) != tuple(features.shape[:-1]):
        raise ShapeError(
            f"Patch assignment {tuple(targets.assignment.shape)} doesn't match "
            + f"features {tuple(features.shape[:-1])}"
        )
    mask = targets.instance_mask()
    if not bool(mask.any()):
        logger.warning("No instance patches in batch; instance-scale loss is 0")
        return features.sum() * 0.0
    norms = torch.linalg.vector_norm(features, dim=-1)
    error = norms - targets.per_patch().to(norms.dtype)
    return error[mask].pow(2).mean()


@dataclass(frozen=True)
class LossReport:
    l_denoise: float
    l_repa: float
    l_is: float
    l_total: float
    weights: LossWeights = LossWeights()
    grad_norms: dict[str, float] = field(default_factory=dict)
    grad_check: str = "not run"

    def identity_error(self) -> float:
        expected = (
            self.l_denoise
            + self.weights.lambda_repa * self.l_repa
            + self.weights.lambda_is * self.l_is
        )
        return abs(self.l_total - expected)

    def as_row(self, step: int) -> dict[str, object]:
        row: dict[str, object] = {
            "step": step,
            "l_denoise": repr(self.l_denoise),
            "l_repa": repr(self.l_repa),
            "l_is": repr(self.l_is),
            "l_total": repr(self.l_total),
        }
        for term in ("denoise", "repa", "is"):
            value = self.grad_norms.get(term)
            row[f"grad_norm_{term}"] = "" if value is None else repr(value)
        return row


class LossTerms(NamedTuple):
    denoise: torch.Tensor
    repa: torch.Tensor
    instance_scale: torch.Tensor
    total: torch.Tensor
    weights: LossWeights

    def weighted(self) -> dict[str, torch.Tensor]:
        return {
            "denoise": self.denoise,
            "repa": self.weights.lambda_repa * self.repa,
            "is": self.weights.lambda_is * self.instance_scale,
        }

    def report(self, grad_norms: Mapping[str, float] | None = None) -> LossReport:
        l_denoise = float(self.denoise)
        l_repa = float(self.repa)
        l_is = float(self.instance_scale)
        return LossReport(
            l_denoise=l_denoise,
            l_repa=l_repa,
            l_is=l_is,
            l_total=float(self.total),
            weights=self.weights,
            grad_norms=dict(grad_norms or {}),
        )


def total_loss(
    eps: torch.Tensor,
    eps_hat: torch.Tensor,
    features: HiddenFeatures,
    d: torch.Tensor,
    head: ProjectionHead,
    targets: InstanceScaleTargets,
    weights: LossWeights = LossWeights(),
    align_tokens: AlignTokens = "all",
) -> LossTerms:
    l_denoise = denoise_loss(eps, eps_hat)
    if align_tokens == "all":
        token_mask = None
    elif align_tokens == "instances":
        token_mask = targets.instance_mask()
    else:
        raise ConfigError(f"Unknown align_tokens '{align_tokens}'")
    l_repa = repa_loss(d, features, head, token_mask=token_mask)
    l_is = instance_scale_loss(features, targets)
    total = l_denoise + weights.lambda_repa * l_repa + weights.lambda_is * l_is
    return LossTerms(l_denoise, l_repa, l_is, total, weights)


def term_grad_norms(
    terms: LossTerms, parameters: Sequence[torch.Tensor]
) -> dict[str, float]:
    """
    L2 norm of the gradient of each weighted loss term w.r.t. ``parameters``.
    The graph is retained for the caller's own backward pass.
    """
    parameters = [p for p in parameters if p.requires_grad]
    norms = {}
    for name, term in terms.weighted().items():
        if not term.requires_grad:
            norms[name] = 0.0
            continue
        grads = torch.autograd.grad(
            term, parameters, retain_graph=True, allow_unused=True
        )
        squared = sum(float(g.detach().pow(2).sum()) for g in grads if g is not None)
        norms[name] = squared**0.5
    return norms


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    tol: float
    num_checked: int
    worst: tuple[str, int] | None
    kinks: list[tuple[str, int]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    @property
    def status(self) -> str:
        return "pass" if self.passed else "fail"

    def __str__(self) -> str:
        text = (
            f"{self.status}: max relative error {self.max_rel_error:.3e} "
            + f"(tol {self.tol:.0e}) over {self.num_checked} entries"
        )
        if self.kinks:
            text += f", {len(self.kinks)} non-differentiable point(s)"
        return text


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | Sequence[torch.Tensor],
    step: float = 1e-4,
    tol: float = 1e-3,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare autograd gradients of the scalar ``loss_fn()`` against central
    finite differences, entry by entry.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-5)``. An entry is flagged as
    a kink when the one-sided slopes disagree by an amount that does not
    shrink with the step size, which smooth functions never show. Kinks are
    reported separately and excluded from the maximum. ``max_elements`` caps
    the entries checked per tensor, chosen deterministically from ``seed``.
    """
    named = dict(params) if isinstance(params, Mapping) else {
        str(i): p for i, p in enumerate(params)
    }
    tensors = list(named.values())
    if any(p.dtype != torch.float64 for p in tensors):
        logger.warning("grad_check on non-float64 parameters; tolerances may not hold")

    analytic = torch.autograd.grad(loss_fn(), tensors, allow_unused=True)

    def evaluate() -> float:
        with torch.no_grad():
            return float(loss_fn())

    max_rel = 0.0
    worst: tuple[str, int] | None = None
    kinks: list[tuple[str, int]] = []
    checked = 0
    generator = torch.Generator().manual_seed(seed)
    for (name, tensor), grad in zip(named.items(), analytic):
        # works on a contiguous copy, written back after each change
        flat = tensor.detach().reshape(-1).clone()
        grad_flat = (
            torch.zeros_like(flat) if grad is None else grad.detach().reshape(-1)
        )
        indices = range(flat.numel())
        if max_elements is not None and flat.numel() > max_elements:
            indices = torch.randperm(flat.numel(), generator=generator)[
                :max_elements
            ].tolist()
        for index in indices:
            original = float(flat[index])
            values = {}
            for offset in (step, -step, step / 2, -step / 2):
                flat[index] = original + offset
                tensor.data.copy_(flat.view_as(tensor))
                values[offset] = evaluate()
            flat[index] = original
            tensor.data.copy_(flat.view_as(tensor))
            center = evaluate()
            checked += 1

            curvature = (values[step] - 2 * center + values[-step]) / step
            half = (values[step / 2] - 2 * center + values[-step / 2]) / (step / 2)
            if abs(curvature) > 1e-6 and abs(half) > 0.75 * abs(curvature):
                kinks.append((name, index))
                continue

            numeric = (values[step] - values[-step]) / (2 * step)
            exact = float(grad_flat[index])
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-5)
            if rel > max_rel:
                max_rel, worst = rel, (name, index)

    report = GradCheckReport(
        max_rel_error=max_rel, tol=tol, num_checked=checked, worst=worst, kinks=kinks
    )
    logger.debug("grad_check %s", report)
    return report
