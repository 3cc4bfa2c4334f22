from __future__ import annotations

import argparse
import dataclasses
from pathlib import Path
from typing import Any

from instance_rsr.configfile import load_config
from instance_rsr.management.base import RSRCommand, case_type
from instance_rsr.trainer import (
    CASE_NAMES,
    CHECKPOINT_NAME,
    Checkpoint,
    TrainConfig,
    Trainer,
    check_resume_config,
)
from instance_rsr.utils import collapse_spaces


class Command(RSRCommand):
    help = collapse_spaces(
        """
        Trains the instance-aware super-resolution backbone for one ablation
        case and writes checkpoints plus CSV loss and eval logs to --out.
        Case 0 is the full method, case 1 drops the alignment losses and
        case 2 drops the mask channels.
    """
    )

    out_help = "Run directory for checkpoints and logs."
    out_required = True
    config_help = "YAML training config."

    def add_command_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument(
            "--case",
            type=case_type,
            default=None,
            help="Ablation case: 0, 1 or 2 (default: from the config).",
        )
        parser.add_argument(
            "--steps",
            type=int,
            default=None,
            help="Train up to this step (default: from the config).",
        )
        parser.add_argument(
            "--resume",
            type=Path,
            default=None,
            help="Checkpoint to continue training from.",
        )
        parser.add_argument(
            "--teacher-features",
            default=None,
            help="Directory of precomputed teacher features, one "
            + "<scene name>.safetensors per training scene.",
        )

    def run(
        self,
        *,
        out: Path,
        config: str | None,
        seed: int | None,
        case: int | None,
        steps: int | None,
        resume: Path | None,
        teacher_features: str | None,
        verbosity: int,
        **options: Any,
    ) -> None:
        checkpoint = None if resume is None else Checkpoint.load(resume)
        if config is not None:
            train_config = load_config(config, TrainConfig)
        elif checkpoint is not None:
            train_config = checkpoint.config
        else:
            train_config = TrainConfig()

        overrides: dict[str, Any] = {}
        if seed is not None:
            overrides["seed"] = seed
        if case is not None:
            overrides["case"] = case
        if steps is not None:
            overrides["steps"] = steps
        if teacher_features is not None:
            overrides["teacher_features"] = str(teacher_features)
        train_config = dataclasses.replace(train_config, **overrides)

        if checkpoint is not None:
            check_resume_config(checkpoint.config, train_config)
        result = Trainer(train_config, Path(out), checkpoint=checkpoint).run()

        if verbosity >= 1:
            self.stdout.write(
                f"Trained case {train_config.case} ({CASE_NAMES[train_config.case]}) "
                + f"to step {result.checkpoint.step}: {Path(out) / CHECKPOINT_NAME}"
            )
