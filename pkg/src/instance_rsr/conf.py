from __future__ import annotations

from typing import Any

import torch
from django.conf import settings

DEFAULTS: dict[str, Any] = {
    "DEVICE": "cpu",
    "DTYPE": "float32",
    "PATCH_SIZE": 4,
    "IMAGE_SIZE": 64,
    "TEACHER_DIM": 64,
    "MAX_INSTANCES": 16,
    "NUM_WORKERS": 0,
}

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def get_setting(name: str) -> Any:
    """
    Read ``INSTANCE_RSR_<name>`` from Django settings, falling back to the
    package default.
    """
    return getattr(settings, f"INSTANCE_RSR_{name}", DEFAULTS[name])


def default_dtype() -> torch.dtype:
    return DTYPES[get_setting("DTYPE")]


def default_device() -> torch.device:
    return torch.device(get_setting("DEVICE"))
