"""
A fast in-process invariant suite, run by the ``selftest`` command.

Checks register themselves with ``@register``. Each one takes a seed and
either returns a short detail string or raises ``CheckFailed``.
"""

from __future__ import annotations

import logging
import traceback
from dataclasses import dataclass
from typing import Callable

import torch

from instance_rsr.backbone import Backbone, BackboneConfig
from instance_rsr.codec import PatchCodec, join, split
from instance_rsr.degrade import (
    DegradationConfig,
    degrade_image,
    downsample,
    identity_kernel,
)
from instance_rsr.diffusion import NoiseSchedule
from instance_rsr.exceptions import ConfigError
from instance_rsr.losses import (
    GradCheckReport,
    assign_patches,
    grad_check,
    instance_scale_loss,
    repa_loss,
    sample_scale_targets,
    total_loss,
)
from instance_rsr.synthdata import (
    MAX_MASK_ID,
    MIN_COLOR_SEPARATION,
    SceneSpec,
    decode_mask_rgb,
    encode_mask_rgb,
    generate_scene,
    mask_color_table,
)
from instance_rsr.teacher import ProjectionHead, TeacherEncoder
from instance_rsr.utils import make_generator

logger = logging.getLogger(__name__)

CheckFunction = Callable[[int], str]

_checks: dict[str, CheckFunction] = {}


class CheckFailed(AssertionError):
    pass


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def register(name: str) -> Callable[[CheckFunction], CheckFunction]:
    def inner(check: CheckFunction) -> CheckFunction:
        _checks[name] = check
        return check

    return inner


def registered_checks() -> list[str]:
    return list(_checks)


def expect(condition: bool, message: str) -> None:
    if not condition:
        raise CheckFailed(message)


def run_selftest(seed: int = 0, names: list[str] | None = None) -> list[CheckResult]:
    results = []
    for name in names or registered_checks():
        try:
            detail = _checks[name](seed)
        except CheckFailed as exc:
            results.append(CheckResult(name, False, str(exc)))
        except Exception as exc:
            logger.debug("Self-test %s crashed:\n%s", name, traceback.format_exc())
            results.append(CheckResult(name, False, f"{type(exc).__name__}: {exc}"))
        else:
            results.append(CheckResult(name, True, detail))
    return results


def tiny_backbone_config(seed: int = 0) -> BackboneConfig:
    """
    Depth 2, width 16 over a 2x2 grid of 1-pixel patches.
    """
    return BackboneConfig(
        depth=2,
        width=16,
        heads=2,
        in_channels=6,
        cond_channels=3,
        grid=(2, 2),
        seed=seed,
    )


@register("degradation-identity-chain")
def check_degradation_identity(seed: int) -> str:
    generator = make_generator(seed)
    config = DegradationConfig(kernel=identity_kernel())
    for _ in range(20):
        x = torch.rand((16, 16, 3), generator=generator, dtype=torch.float64)
        expect(
            torch.equal(degrade_image(x, config), x), "identity chain changed the image"
        )
    return "20 random images unchanged"


@register("area-downsample-composition")
def check_downsample_composition(seed: int) -> str:
    x = torch.rand((8, 8, 3), generator=make_generator(seed), dtype=torch.float64)
    twice = downsample(downsample(x, 2), 2)
    once = downsample(x, 4)
    error = float((twice - once).abs().max())
    expect(error <= 1e-12, f"s=2 twice differs from s=4 by {error:.3e}")
    return f"max diff {error:.1e}"


@register("codec-round-trip")
def check_codec_round_trip(seed: int) -> str:
    generator = make_generator(seed)
    for patch_size in (1, 2, 4):
        codec = PatchCodec(patch_size)
        x = torch.rand((16, 16, 3), generator=generator, dtype=torch.float64)
        m = torch.rand((16, 16, 3), generator=generator, dtype=torch.float64)
        z_x, z_m = codec.encode(x), codec.encode(m)
        expect(
            torch.equal(codec.decode(z_x), x), f"p={patch_size}: decode(encode(x)) != x"
        )
        a, b = split(join(z_x, z_m, patch_size))
        expect(torch.equal(a, z_x) and torch.equal(b, z_m), "split(join) != identity")
    return "p in {1, 2, 4}"


@register("mask-code-round-trip")
def check_mask_code(seed: int) -> str:
    ids = torch.arange(MAX_MASK_ID + 1)
    round_trip = decode_mask_rgb(encode_mask_rgb(ids))
    expect(torch.equal(round_trip, ids), "mask code not injective")
    table = torch.from_numpy(mask_color_table()[:256])
    distances = torch.cdist(table, table) + torch.eye(len(table)) * 10
    separation = float(distances.min())
    expect(
        separation >= MIN_COLOR_SEPARATION - 1e-12,
        f"min color separation {separation:.4f}",
    )
    return f"{MAX_MASK_ID + 1} IDs round-trip, min separation {separation:.4f}"


@register("scene-mask-consistency")
def check_scene_masks(seed: int) -> str:
    for offset in range(25):
        scene = generate_scene(SceneSpec(width=32, height=32, seed=seed + offset))
        present = sorted(int(i) for i in scene.mask.unique() if i != 0)
        expect(present == scene.ids, f"seed {seed + offset}: mask IDs {present}")
        contiguous = list(range(1, len(scene.ids) + 1))
        expect(scene.ids == contiguous, "instance IDs not contiguous")
    return "25 scenes"


@register("schedule-monotonic")
def check_schedules(seed: int) -> str:
    for kind in ("linear", "cosine"):
        for T in (10, 50, 1000):
            alpha_bars = NoiseSchedule.build(kind, T).alpha_bars
            expect(bool((alpha_bars[1:] < alpha_bars[:-1]).all()), f"{kind} T={T}")
    return "linear and cosine, T in {10, 50, 1000}"


@register("ddim-exact-inversion")
def check_ddim_inversion(seed: int) -> str:
    generator = make_generator(seed)
    schedule = NoiseSchedule.linear(T=10)
    z_0 = torch.randn((4, 4, 6), generator=generator, dtype=torch.float64)
    eps = torch.randn((4, 4, 6), generator=generator, dtype=torch.float64)
    worst = 0.0
    for t in range(1, schedule.T + 1):
        z_t = schedule.forward_marginal(z_0, t, eps)
        recovered = schedule.ddim_step(z_t, eps, t, 0).prev_sample
        worst = max(worst, float((recovered - z_0).abs().max()))
    expect(worst <= 1e-5, f"max error {worst:.3e}")
    return f"max error {worst:.1e}"


@register("zero-init-condition-identity")
def check_zero_init(seed: int) -> str:
    config = tiny_backbone_config(seed)
    model = Backbone(config).double()
    generator = make_generator(seed)
    worst = 0.0
    for _ in range(10):
        z = torch.randn((2, 2, 2, 6), generator=generator, dtype=torch.float64)
        t = torch.randint(1, 1001, (2,), generator=generator)
        cond_a = torch.randn((2, 2, 2, 3), generator=generator, dtype=torch.float64)
        cond_b = torch.randn((2, 2, 2, 3), generator=generator, dtype=torch.float64)
        with torch.no_grad():
            diff = model.denoiser(z, t, cond_a) - model.denoiser(z, t, cond_b)
        worst = max(worst, float(diff.abs().max()))
    expect(worst <= 1e-7, f"condition changed the output by {worst:.3e}")
    return f"max diff {worst:.1e}"


@register("loss-identities")
def check_losses(seed: int) -> str:
    generator = make_generator(seed)
    head = ProjectionHead(4, 4, activation="identity").identity_init().double()
    f = torch.rand((1, 3, 4), generator=generator, dtype=torch.float64) + 0.1
    l_repa = float(repa_loss(f, f, head))
    expect(abs(l_repa + 1.0) <= 1e-12, f"perfect alignment gave {l_repa}")

    assignment = torch.ones((1, 3), dtype=torch.long)
    targets = sample_scale_targets(assignment, generator)
    targets.targets[:, 1] = 2.0
    zeros = torch.zeros((1, 3, 4), dtype=torch.float64)
    l_is = float(instance_scale_loss(zeros, targets))
    expect(abs(l_is - 4.0) <= 1e-12, f"f=0, target 2 gave {l_is}")
    return "repa -1 at alignment, instance-scale 4 at f=0"


def randomize_injections(
    model: Backbone, std: float, generator: torch.Generator
) -> None:
    with torch.no_grad():
        for parameter in model.branch.injections.parameters():
            noise = torch.randn(
                parameter.shape, generator=generator, dtype=parameter.dtype
            )
            parameter.copy_(std * noise)


LOSS_TERMS = ("total", "denoise", "repa", "instance_scale")


def gradient_check_report(
    seed: int = 0,
    term: str = "total",
    max_elements: int | None = 3,
    tol: float = 1e-3,
    branch_init: float = 0.05,
) -> GradCheckReport:
    """
    Finite-difference check of one loss term through the tiny float64
    backbone and projection head, on a 2x2 scene with two instances.

    The condition injections start from normal noise of std ``branch_init``
    instead of zero so gradients reach the whole condition branch; pass 0 to
    check the zero-initialized model.
    """
    if term not in LOSS_TERMS:
        raise ConfigError(f"Unknown loss term '{term}', expected one of {LOSS_TERMS}")
    config = tiny_backbone_config(seed)
    model = Backbone(config).double()
    head = ProjectionHead(config.width, 8).double()
    teacher = TeacherEncoder(patch_size=1, dim=8, seed=seed).double()
    generator = make_generator(seed)
    randomize_injections(model, branch_init, generator)

    image = torch.rand((1, 2, 2, 3), generator=generator, dtype=torch.float64)
    mask = torch.tensor([[[1, 1], [2, 0]]])
    z_t = torch.randn((1, 2, 2, 6), generator=generator, dtype=torch.float64)
    eps = torch.randn((1, 2, 2, 6), generator=generator, dtype=torch.float64)
    cond = torch.randn((1, 2, 2, 3), generator=generator, dtype=torch.float64)
    t = torch.tensor([7])
    d = teacher.teacher_features(image)
    targets = sample_scale_targets(assign_patches(mask, 1), generator)

    def loss() -> torch.Tensor:
        output = model(z_t, t, cond)
        terms = total_loss(eps, output.eps_hat, output.features, d, head, targets)
        return getattr(terms, term)

    params = {f"backbone.{k}": v for k, v in model.named_parameters()}
    params.update({f"head.{k}": v for k, v in head.named_parameters()})
    return grad_check(loss, params, tol=tol, max_elements=max_elements, seed=seed)


@register("gradient-check")
def check_gradients(seed: int) -> str:
    report = gradient_check_report(seed)
    expect(report.passed, str(report))
    return str(report)


