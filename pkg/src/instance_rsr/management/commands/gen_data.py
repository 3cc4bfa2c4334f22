from __future__ import annotations

import argparse
from pathlib import Path
from typing import Any

from instance_rsr.conf import get_setting
from instance_rsr.management.base import RSRCommand
from instance_rsr.synthdata import SceneSpec, generate_scene, save_sample
from instance_rsr.utils import collapse_spaces, derive_seed


class Command(RSRCommand):
    help = collapse_spaces(
        """
        Generates synthetic desk-scale scenes with ground-truth instance
        masks into the --out directory: an image PNG, an RGB-coded mask PNG
        and a YAML sidecar per scene.
    """
    )

    out_help = "Directory to write the scenes to."
    out_required = True

    def add_command_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument(
            "--count", type=int, default=8, help="Number of scenes (default 8)."
        )
        parser.add_argument(
            "--size",
            type=int,
            default=None,
            help="Scene side in pixels (default INSTANCE_RSR_IMAGE_SIZE).",
        )
        parser.add_argument(
            "--num-instances",
            type=int,
            default=4,
            dest="num_instances",
            help="Foreground instances per scene (default 4).",
        )

    def run(
        self,
        *,
        out: Path,
        seed: int | None,
        count: int,
        size: int | None,
        num_instances: int,
        verbosity: int,
        **options: Any,
    ) -> None:
        seed = self.seed_or_default(seed)
        size = get_setting("IMAGE_SIZE") if size is None else size
        for index in range(count):
            spec = SceneSpec(
                width=size,
                height=size,
                num_instances=num_instances,
                seed=derive_seed(seed, index),
                patch_size=get_setting("PATCH_SIZE"),
            )
            save_sample(generate_scene(spec), Path(out))
        if verbosity >= 1:
            self.stdout.write(f"Wrote {count} scenes to {out}")
