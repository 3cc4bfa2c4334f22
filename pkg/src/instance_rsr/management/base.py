from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import Any

from django.core.management import BaseCommand, CommandError

from instance_rsr.exceptions import ConfigError, InstanceRSRError
from instance_rsr.trainer import check_case


def case_type(value: str) -> int:
    """
    argparse ``type`` for ``--case``; rejects anything but 0, 1 or 2.
    """
    try:
        case = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid case '{value}'")
    try:
        return check_case(case)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc))


class RSRCommand(BaseCommand):
    """
    Base for the ``instance_rsr`` commands. Adds the global ``--seed``,
    ``--config``, ``--out`` and ``--verbose`` flags and reports library
    errors as a single ``CODE: message`` line.
    """

    out_help = "Output path."
    out_required = False
    config_help = "YAML configuration file."

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument(
            "--seed",
            type=int,
            default=None,
            help="Seed all randomness flows from (default 0).",
        )
        parser.add_argument("--config", default=None, help=self.config_help)
        parser.add_argument(
            "--out", type=Path, required=self.out_required, help=self.out_help
        )
        parser.add_argument(
            "--verbose",
            action="store_true",
            default=False,
            help="Log at DEBUG level.",
        )
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser: argparse.ArgumentParser) -> None:
        pass

    def handle(self, *args: Any, verbose: bool, **options: Any) -> None:
        if verbose:
            logging.getLogger("instance_rsr").setLevel(logging.DEBUG)
        try:
            self.run(**options)
        except InstanceRSRError as exc:
            raise CommandError(f"{exc.code}: {exc}") from exc

    def run(self, **options: Any) -> None:  # pragma: no cover
        raise NotImplementedError

    @staticmethod
    def seed_or_default(seed: int | None) -> int:
        return 0 if seed is None else seed
