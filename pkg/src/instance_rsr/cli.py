"""
The ``instance-rsr`` console script: runs the package's management commands
without a Django project, configuring minimal settings when none exist.
"""

from __future__ import annotations

import os
import sys
from typing import Sequence

import django
from django.conf import settings
from django.core.management import load_command_class

PROG = "instance-rsr"

COMMANDS = {
    "gen-data": "gen_data",
    "degrade": "degrade",
    "train": "train",
    "sample": "sample",
    "evaluate": "evaluate",
    "probe": "probe",
    "export-features": "export_features",
    "grad-check": "grad_check",
    "selftest": "selftest",
}

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {"plain": {"format": "%(levelname)s %(name)s: %(message)s"}},
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "plain"},
    },
    "loggers": {
        "instance_rsr": {"handlers": ["console"], "level": "INFO"},
    },
}


def usage() -> str:
    return (
        f"usage: {PROG} <command> [options]\n\n"
        + "commands:\n"
        + "".join(f"  {name}\n" for name in COMMANDS)
        + f"\nRun '{PROG} <command> --help' for a command's options.\n"
    )


def setup() -> None:
    if not settings.configured and "DJANGO_SETTINGS_MODULE" not in os.environ:
        settings.configure(INSTALLED_APPS=["instance_rsr"], LOGGING=LOGGING)
    django.setup()


def run(argv: Sequence[str] | None = None) -> int:
    """
    Dispatch ``argv`` (without the program name) to its command and return
    the exit code: 0 ok, 1 runtime failure, 2 usage error.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] in ("-h", "--help"):
        sys.stdout.write(usage())
        return 0
    if not argv or argv[0] not in COMMANDS:
        if argv:
            sys.stderr.write(f"{PROG}: unknown command '{argv[0]}'\n")
        sys.stderr.write(usage())
        return 2

    setup()
    command = load_command_class("instance_rsr", COMMANDS[argv[0]])
    try:
        command.run_from_argv([PROG, argv[0], *argv[1:]])
    except SystemExit as exc:
        if exc.code is None:
            return 0
        return exc.code if isinstance(exc.code, int) else 1
    return 0


def main() -> None:
    sys.exit(run())
