"""
Full-reference image-quality metrics, the bicubic baseline, and directory
evaluation producing a CSV report.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from einops import rearrange

from instance_rsr.degrade import gaussian_kernel
from instance_rsr.exceptions import ConfigError, ShapeError
from instance_rsr.pipeline import SuperResolver, resize_image
from instance_rsr.synthdata import decode_mask_rgb, list_samples, load_png, load_sample
from instance_rsr.teacher import TeacherEncoder
from instance_rsr.utils import make_generator

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

REPORT_COLUMNS = ("name", "psnr", "ssim", "feature_dist", "mean_iou")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"Shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def psnr(a: torch.Tensor, b: torch.Tensor, cap: float = PSNR_CAP) -> float:
    """
    PSNR in dB for images in [0, 1]; identical images report ``cap``.
    """
    _check_same_shape(a, b)
    mse = float((a.double() - b.double()).pow(2).mean())
    if mse == 0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    """
    Mean SSIM over an ``H x W x 3`` image pair with an 11x11 Gaussian window
    (sigma 1.5), valid region only, averaged over channels.
    """
    _check_same_shape(a, b)
    if a.shape[-3] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    x = rearrange(a.double(), "h w c -> c 1 h w")
    y = rearrange(b.double(), "h w c -> c 1 h w")
    window = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)[None, None]

    def blur(image: torch.Tensor) -> torch.Tensor:
        return F.conv2d(image, window)

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x**2
    var_y = blur(y * y) - mu_y**2
    cov = blur(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )
    return float(ssim_map.mean())


def mask_iou(pred: torch.Tensor, gt: torch.Tensor) -> dict[int, float]:
    """
    IoU per ground-truth instance ID (background excluded).
    """
    _check_same_shape(pred, gt)
    out = {}
    for instance_id in sorted(int(i) for i in gt.unique()):
        if instance_id == 0:
            continue
        p = pred == instance_id
        g = gt == instance_id
        union = int((p | g).sum())
        out[instance_id] = int((p & g).sum()) / union
    return out


def feature_dist(a: torch.Tensor, b: torch.Tensor, teacher: TeacherEncoder) -> float:
    """
    Mean per-patch cosine distance between teacher features of two images.
    """
    _check_same_shape(a, b)
    dtype = teacher.embed.weight.dtype
    fa = teacher.teacher_features(a.to(dtype))
    fb = teacher.teacher_features(b.to(dtype))
    return float((1.0 - F.cosine_similarity(fa, fb, dim=-1, eps=1e-8)).mean())


def bicubic_upsample(lr: torch.Tensor, scale: int) -> torch.Tensor:
    height, width = lr.shape[-3], lr.shape[-2]
    single = lr.dim() == 3
    batch = lr[None] if single else lr
    out = resize_image(batch, (height * scale, width * scale))
    return out[0] if single else out


@dataclass(frozen=True)
class ImageScores:
    name: str
    psnr: float
    ssim: float
    feature_dist: float | None = None
    mean_iou: float | None = None


@dataclass
class EvalReport:
    rows: list[ImageScores] = field(default_factory=list)

    def aggregate(self) -> dict[str, float]:
        out = {}
        for column in REPORT_COLUMNS[1:]:
            values = [getattr(row, column) for row in self.rows]
            values = [value for value in values if value is not None]
            if values:
                out[column] = sum(values) / len(values)
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(
                    {k: "" if v is None else v for k, v in asdict(row).items()}
                )
            mean = self.aggregate()
            writer.writerow({"name": "mean", **mean})


def score_pair(
    name: str,
    pred: torch.Tensor,
    gt: torch.Tensor,
    teacher: TeacherEncoder | None = None,
    pred_mask: torch.Tensor | None = None,
    gt_mask: torch.Tensor | None = None,
) -> ImageScores:
    mean_iou = None
    if pred_mask is not None and gt_mask is not None:
        ious = mask_iou(pred_mask, gt_mask)
        mean_iou = sum(ious.values()) / len(ious) if ious else None
    return ImageScores(
        name=name,
        psnr=psnr(pred, gt),
        ssim=ssim(pred, gt),
        feature_dist=None if teacher is None else feature_dist(pred, gt, teacher),
        mean_iou=mean_iou,
    )


def evaluate_dirs(
    pred_dir: str | Path,
    gt_dir: str | Path,
    teacher: TeacherEncoder | None = None,
) -> EvalReport:
    """
    Score every ground-truth sample in ``gt_dir`` against the prediction of
    the same name in ``pred_dir`` (``{name}_img.png``, plus ``{name}_mask.png``
    when present).
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    names = list_samples(gt_dir)
    if not names:
        raise ConfigError(f"No samples found in '{gt_dir}'")
    report = EvalReport()
    for name in names:
        image_path = pred_dir / f"{name}_img.png"
        if not image_path.exists():
            raise ConfigError(f"No prediction for '{name}' in '{pred_dir}'")
        gt = load_sample(gt_dir, name)
        pred = load_png(image_path)
        mask_path = pred_dir / f"{name}_mask.png"
        pred_mask = decode_mask_rgb(load_png(mask_path)) if mask_path.exists() else None
        report.rows.append(
            score_pair(name, pred, gt.image, teacher, pred_mask, gt.mask)
        )
        logger.debug("Scored %s: %s", name, report.rows[-1])
    return report


def sampling_step_sweep(
    resolver: SuperResolver,
    pairs: Iterable[tuple[torch.Tensor, torch.Tensor]],
    steps: Sequence[int] = (5, 10, 50),
    seed: int = 0,
) -> dict[int, float]:
    """
    Mean PSNR of the resolver's output against HR targets for each number of
    DDIM steps. Every setting starts from the same initial noise.
    """
    pairs = list(pairs)
    out = {}
    for count in steps:
        scores = []
        for index, (lr, hr) in enumerate(pairs):
            result = resolver.super_resolve(
                lr, steps=count, generator=make_generator(seed + index)
            )
            scores.append(psnr(result.image, hr))
        out[count] = sum(scores) / len(scores)
        logger.info("%d sampling steps: mean PSNR %.2f dB", count, out[count])
    return out
