from __future__ import annotations

import argparse
from pathlib import Path
from typing import Any

from instance_rsr.configfile import load_config
from instance_rsr.degrade import DegradationFileConfig, degrade
from instance_rsr.exceptions import ConfigError
from instance_rsr.management.base import RSRCommand
from instance_rsr.synthdata import list_samples, load_sample, save_png
from instance_rsr.utils import collapse_spaces, derive_seed

LR_SUFFIX = "_lr"


class Command(RSRCommand):
    help = collapse_spaces(
        """
        Degrades every scene in --in with the blur, downsample, noise,
        downsample, compression chain and writes {name}_lr.png files to
        --out. Without --config the chain is a 2x2 area downsample.
    """
    )

    out_help = "Directory to write the LR images to."
    out_required = True
    config_help = "YAML degradation config (kernel, scales, noise, quality)."

    def add_command_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument(
            "--in",
            dest="in_dir",
            type=Path,
            required=True,
            help="Directory of scenes written by gen-data.",
        )

    def run(
        self,
        *,
        in_dir: Path,
        out: Path,
        config: str | None,
        seed: int | None,
        verbosity: int,
        **options: Any,
    ) -> None:
        seed = self.seed_or_default(seed)
        file_config = (
            DegradationFileConfig()
            if config is None
            else load_config(config, DegradationFileConfig)
        )
        names = list_samples(in_dir)
        if not names:
            raise ConfigError(f"No scenes found in '{in_dir}'")

        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for index, name in enumerate(names):
            cfg = file_config.build(derive_seed(seed, index))
            pair = degrade(load_sample(in_dir, name), cfg)
            save_png(pair.lr, out / f"{name}{LR_SUFFIX}.png")
        if verbosity >= 1:
            self.stdout.write(f"Degraded {len(names)} scenes into {out}")
