from __future__ import annotations

import argparse
from pathlib import Path
from typing import Any

from instance_rsr.management.base import RSRCommand
from instance_rsr.probe import export_features, parse_layers
from instance_rsr.trainer import load_trainer
from instance_rsr.utils import collapse_spaces


class Command(RSRCommand):
    help = collapse_spaces(
        """
        Dumps one backbone layer's patch features with category and instance
        labels to a safetensors file, plus a CSV of the labels, for external
        projection and plotting.
    """
    )

    out_help = "Output .safetensors path; labels go to the sibling .csv."
    out_required = True

    def add_command_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--ckpt", type=Path, required=True, help="Checkpoint file.")
        parser.add_argument(
            "--layer",
            type=int,
            default=None,
            help="1-based layer index (default: the alignment tap layer).",
        )
        parser.add_argument(
            "--scenes",
            type=int,
            default=16,
            help="Held-out scenes to collect features from (default 16).",
        )

    def run(
        self,
        *,
        out: Path,
        ckpt: Path,
        layer: int | None,
        scenes: int,
        verbosity: int,
        **options: Any,
    ) -> None:
        trainer = load_trainer(ckpt)
        config = trainer.backbone.config
        if layer is None:
            layer = config.resolved_tap_layer
        else:
            parse_layers(str(layer), config.depth)
        tensors_path, csv_path = export_features(trainer, layer, Path(out), scenes)

        if verbosity >= 1:
            self.stdout.write(
                f"Wrote layer {layer} features to {tensors_path} and {csv_path}"
            )
