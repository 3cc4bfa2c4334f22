from __future__ import annotations

import django
import pytest
import torch


def pytest_report_header(config):
    dot_version = ".".join(str(x) for x in django.VERSION)
    return f"Django version: {dot_version}\ntorch version: {torch.__version__}"


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run the long reference-run tests marked 'slow'.",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
