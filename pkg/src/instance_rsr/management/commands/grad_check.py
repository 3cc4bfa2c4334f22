from __future__ import annotations

import argparse
from typing import Any

from instance_rsr.exceptions import GradCheckError
from instance_rsr.management.base import RSRCommand
from instance_rsr.selftest import LOSS_TERMS, gradient_check_report
from instance_rsr.utils import collapse_spaces


class Command(RSRCommand):
    help = collapse_spaces(
        """
        Compares autograd gradients of the training losses against central
        finite differences through a tiny float64 backbone.
    """
    )

    def add_command_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument(
            "--term",
            choices=LOSS_TERMS,
            default="total",
            help="Loss term to differentiate (default total).",
        )
        parser.add_argument(
            "--elements",
            type=int,
            default=8,
            help="Entries checked per parameter tensor (default 8).",
        )
        parser.add_argument(
            "--tol",
            type=float,
            default=1e-3,
            help="Maximum relative error (default 1e-3).",
        )

    def run(
        self,
        *,
        seed: int | None,
        term: str,
        elements: int,
        tol: float,
        verbosity: int,
        **options: Any,
    ) -> None:
        report = gradient_check_report(
            self.seed_or_default(seed), term, max_elements=elements, tol=tol
        )
        if not report.passed:
            raise GradCheckError(f"{term}: {report}")
        if verbosity >= 1:
            self.stdout.write(f"{term}: {report}")
