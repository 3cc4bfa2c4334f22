from __future__ import annotations

import argparse
from pathlib import Path
from typing import Any

from instance_rsr.conf import get_setting
from instance_rsr.evalkit import evaluate_dirs
from instance_rsr.management.base import RSRCommand
from instance_rsr.teacher import TeacherEncoder
from instance_rsr.trainer import TEACHER_KEY
from instance_rsr.utils import collapse_spaces, derive_seed


class Command(RSRCommand):
    help = collapse_spaces(
        """
        Scores predictions in --pred against the ground-truth scenes in --gt
        (PSNR, SSIM and, where masks were predicted, mean instance IoU) and
        writes a CSV report with a trailing mean row.
    """
    )

    out_help = "CSV report path."
    out_required = True

    def add_command_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument(
            "--pred", type=Path, required=True, help="Directory of predictions."
        )
        parser.add_argument(
            "--gt", type=Path, required=True, help="Directory of ground-truth scenes."
        )
        parser.add_argument(
            "--feature-dist",
            action="store_true",
            dest="feature_dist",
            default=False,
            help="Also report the teacher feature distance, using the teacher "
            "a training run with the same --seed builds.",
        )

    def run(
        self,
        *,
        out: Path,
        seed: int | None,
        pred: Path,
        gt: Path,
        feature_dist: bool,
        verbosity: int,
        **options: Any,
    ) -> None:
        teacher = None
        if feature_dist:
            teacher = TeacherEncoder(
                patch_size=get_setting("PATCH_SIZE"),
                dim=get_setting("TEACHER_DIM"),
                seed=derive_seed(self.seed_or_default(seed), TEACHER_KEY),
            ).double()
        report = evaluate_dirs(pred, gt, teacher)
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        report.write_csv(out)

        if verbosity >= 1:
            mean = report.aggregate()
            summary = ", ".join(f"{key}={value:.4f}" for key, value in mean.items())
            self.stdout.write(f"{len(report.rows)} images: {summary}")
