from __future__ import annotations

from typing import Any

from django.core import checks

from instance_rsr.conf import DTYPES, get_setting


def register_checks() -> None:
    checks.register(check_settings)


def check_settings(**kwargs: Any) -> list[checks.CheckMessage]:
    errors: list[checks.CheckMessage] = []

    image_size = get_setting("IMAGE_SIZE")
    patch_size = get_setting("PATCH_SIZE")
    if patch_size < 1 or image_size % patch_size != 0:
        errors.append(patch_size_error(image_size, patch_size))

    dtype = get_setting("DTYPE")
    if dtype not in DTYPES:
        errors.append(dtype_error(dtype))

    max_instances = get_setting("MAX_INSTANCES")
    if not 1 <= max_instances <= 16:
        errors.append(max_instances_error(max_instances))

    return errors


def patch_size_error(image_size: int, patch_size: int) -> checks.Error:
    return checks.Error(
        f"INSTANCE_RSR_IMAGE_SIZE ({image_size}) is not divisible by "
        + f"INSTANCE_RSR_PATCH_SIZE ({patch_size})",
        hint=(
            "Scenes are split into non-overlapping square patches, so the "
            + "image side must be a whole number of patches."
        ),
        id="instance_rsr.E001",
    )


def dtype_error(dtype: str) -> checks.Error:
    return checks.Error(
        f"INSTANCE_RSR_DTYPE '{dtype}' is not supported",
        hint="Use one of: " + ", ".join(sorted(DTYPES)),
        id="instance_rsr.E002",
    )


def max_instances_error(max_instances: int) -> checks.Error:
    return checks.Error(
        f"INSTANCE_RSR_MAX_INSTANCES ({max_instances}) must be in [1, 16]",
        hint=None,
        id="instance_rsr.E003",
    )
