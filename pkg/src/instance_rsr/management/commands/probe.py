from __future__ import annotations

import argparse
from pathlib import Path
from typing import Any

from instance_rsr.management.base import RSRCommand
from instance_rsr.probe import parse_layers, probe_layers
from instance_rsr.trainer import load_trainer
from instance_rsr.utils import collapse_spaces


class Command(RSRCommand):
    help = collapse_spaces(
        """
        Fits linear probes for patch shape category on the features of each
        requested backbone layer and writes accuracy, instance
        discrimination and Fisher ratio per layer to a CSV report.
    """
    )

    out_help = "CSV report path."
    out_required = True

    def add_command_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--ckpt", type=Path, required=True, help="Checkpoint file.")
        parser.add_argument(
            "--layers",
            default="all",
            help="'all' or comma-separated 1-based layer indices (default all).",
        )
        parser.add_argument(
            "--scenes",
            type=int,
            default=16,
            help="Held-out scenes to collect features from (default 16).",
        )
        parser.add_argument(
            "--allow-degenerate",
            action="store_true",
            dest="allow_degenerate",
            default=False,
            help="Report single-class probes as degenerate instead of failing.",
        )

    def run(
        self,
        *,
        out: Path,
        ckpt: Path,
        layers: str,
        scenes: int,
        allow_degenerate: bool,
        verbosity: int,
        **options: Any,
    ) -> None:
        trainer = load_trainer(ckpt)
        selected = parse_layers(layers, trainer.backbone.config.depth)
        report = probe_layers(trainer, selected, scenes, allow_degenerate)
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        report.write_csv(out)

        if verbosity >= 1:
            for result in report.results:
                self.stdout.write(
                    f"layer {result.layer}: accuracy {result.accuracy:.3f}, "
                    + f"id accuracy {result.id_accuracy:.3f}, "
                    + f"fisher {result.fisher_ratio:.3f}"
                )
            self.stdout.write(f"Best layer: {report.best_layer()}")
