from __future__ import annotations

import argparse
from pathlib import Path
from typing import Any

from instance_rsr.evalkit import bicubic_upsample
from instance_rsr.exceptions import ConfigError
from instance_rsr.management.base import RSRCommand
from instance_rsr.management.commands.degrade import LR_SUFFIX
from instance_rsr.synthdata import encode_mask_rgb, load_png, save_png
from instance_rsr.trainer import load_trainer
from instance_rsr.utils import collapse_spaces, derive_seed, make_generator


def lr_inputs(path: Path) -> list[tuple[str, Path]]:
    """
    ``(name, path)`` pairs for a single LR PNG or every ``*_lr.png`` in a
    directory, the name dropping the ``_lr`` suffix.
    """
    paths = sorted(path.glob(f"*{LR_SUFFIX}.png")) if path.is_dir() else [path]
    out = []
    for item in paths:
        name = item.stem
        if name.endswith(LR_SUFFIX):
            name = name[: -len(LR_SUFFIX)]
        out.append((name, item))
    return out


class Command(RSRCommand):
    help = collapse_spaces(
        """
        Super-resolves LR images with a trained checkpoint, writing
        {name}_img.png and, for models with mask channels, the RGB-coded
        {name}_mask.png to --out. --bicubic writes the bicubic baseline
        instead and needs no checkpoint.
    """
    )

    out_help = "Directory to write the SR outputs to."
    out_required = True

    def add_command_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--ckpt", type=Path, default=None, help="Checkpoint file.")
        parser.add_argument(
            "--lr",
            type=Path,
            required=True,
            help="An LR PNG, or a directory of *_lr.png files.",
        )
        parser.add_argument(
            "--steps", type=int, default=10, help="Sampling steps (default 10)."
        )
        parser.add_argument(
            "--eta", type=float, default=0.0, help="DDIM eta (default 0)."
        )
        parser.add_argument(
            "--sampler",
            choices=["ddim", "ancestral"],
            default="ddim",
            help="Reverse process (default ddim).",
        )
        parser.add_argument(
            "--size",
            type=int,
            default=None,
            help="Resize the square outputs to this side.",
        )
        parser.add_argument(
            "--bicubic",
            type=int,
            default=None,
            metavar="SCALE",
            help="Write the bicubic upsample by SCALE instead of sampling.",
        )

    def run(
        self,
        *,
        out: Path,
        seed: int | None,
        ckpt: Path | None,
        lr: Path,
        steps: int,
        eta: float,
        sampler: str,
        size: int | None,
        bicubic: int | None,
        verbosity: int,
        **options: Any,
    ) -> None:
        seed = self.seed_or_default(seed)
        inputs = lr_inputs(Path(lr))
        if not inputs:
            raise ConfigError(f"No LR images found at '{lr}'")
        if bicubic is None and ckpt is None:
            raise ConfigError("Pass --ckpt, or --bicubic for the baseline")

        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        resolver = None if bicubic is not None else load_trainer(ckpt).resolver()
        target = None if size is None else (size, size)

        for index, (name, path) in enumerate(inputs):
            image = load_png(path)
            if resolver is None:
                save_png(bicubic_upsample(image, bicubic), out / f"{name}_img.png")
                continue
            result = resolver.super_resolve(
                image,
                steps=steps,
                eta=eta,
                generator=make_generator(derive_seed(seed, index)),
                sampler=sampler,  # type: ignore [arg-type]
                size=target,
            )
            save_png(result.image, out / f"{name}_img.png")
            if result.mask is not None:
                save_png(encode_mask_rgb(result.mask), out / f"{name}_mask.png")

        if verbosity >= 1:
            self.stdout.write(f"Wrote {len(inputs)} outputs to {out}")
