#!/usr/bin/env python
from __future__ import annotations

import os
import subprocess
import sys
from pathlib import Path

PYTHONS = ("3.10", "3.11", "3.12")
DJANGOS = {
    "42": "Django>=4.2a1,<5.0",
    "50": "Django>=5.0a1,<5.1",
}

if __name__ == "__main__":
    os.chdir(Path(__file__).parent)
    os.environ["CUSTOM_COMPILE_COMMAND"] = "requirements/compile.py"
    os.environ.pop("PIP_REQUIRE_VIRTUALENV", None)
    common_args = [
        "-m",
        "piptools",
        "compile",
        "--generate-hashes",
        "--allow-unsafe",
    ] + sys.argv[1:]
    for python in PYTHONS:
        for key, django in DJANGOS.items():
            subprocess.run(
                [
                    f"python{python}",
                    *common_args,
                    "-P",
                    django,
                    "-o",
                    f"py{python.replace('.', '')}-django{key}.txt",
                ],
                check=True,
                capture_output=True,
            )
