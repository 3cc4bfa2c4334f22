from __future__ import annotations

import argparse
from typing import Any

from instance_rsr.exceptions import SelftestError
from instance_rsr.management.base import RSRCommand
from instance_rsr.selftest import registered_checks, run_selftest
from instance_rsr.utils import StopWatch, collapse_spaces


class Command(RSRCommand):
    help = collapse_spaces(
        """
        Runs the in-process invariant suite: degradation, codec, mask code,
        noise schedule, sampler, conditioning and loss identities, and a
        gradient check.
    """
    )

    def add_command_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument(
            "--only",
            action="append",
            choices=registered_checks(),
            default=None,
            help="Run only this check; may be repeated.",
        )

    def run(
        self,
        *,
        seed: int | None,
        only: list[str] | None,
        verbosity: int,
        **options: Any,
    ) -> None:
        with StopWatch() as watch:
            results = run_selftest(self.seed_or_default(seed), only)
        failed = [result.name for result in results if not result.passed]

        if verbosity >= 1:
            for result in results:
                status = "ok" if result.passed else "FAIL"
                self.stdout.write(f"{status:4} {result.name}: {result.detail}")
            self.stdout.write(
                f"{len(results) - len(failed)}/{len(results)} checks passed "
                + f"in {watch.total_time:.1f}s"
            )
        if failed:
            raise SelftestError(f"{len(failed)} check(s) failed: " + ", ".join(failed))
